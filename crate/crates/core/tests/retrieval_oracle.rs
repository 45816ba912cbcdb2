use infotech_core::corpus::{parse_corpus, Corpus, TechnologyRecord};
use infotech_core::embedding::{EmbeddingError, EmbeddingProvider, EmbeddingVector, HashEmbedder};
use infotech_core::retrieval::{images_for, RetrievalIndex, SearchHit, SearchParams};
use infotech_testkit::{BruteForce, fixture, synthetic_corpus, synthetic_queries};
use proptest::prelude::*;
use serde_json::Value;

fn params(k: usize) -> SearchParams {
    SearchParams { k, ..Default::default() }
}

fn build(doc: &Value, provider: &HashEmbedder) -> (Corpus, RetrievalIndex) {
    let corpus = parse_corpus(&serde_json::to_vec(doc).unwrap(), "synthetic").unwrap();
    let index = RetrievalIndex::build(&corpus, provider).unwrap();
    (corpus, index)
}

fn as_triples(hits: &[SearchHit<'_>]) -> Vec<(u64, String, f64)> {
    hits.iter().map(|h| (h.chunk.record_id, h.chunk.section_key.clone(), h.score)).collect()
}

#[test]
fn matches_brute_force_on_generated_queries() {
    let doc = synthetic_corpus(41, 3);
    let provider = HashEmbedder::default();
    let (_, index) = build(&doc, &provider);
    let embed = |t: &str| provider.embed(t).unwrap().into_inner();
    let oracle = BruteForce::new(&doc, &embed);
    assert_eq!(oracle.len(), index.chunks().len());
    for query in synthetic_queries(60, 3) {
        for k in [1, 3, 10] {
            let got = as_triples(&index.search(&provider, &query, &params(k)).unwrap().hits);
            let want = oracle.top_k(&query, k);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!((g.0, &g.1), (w.0, &w.1), "query {query:?} k {k}");
                assert!((g.2 - w.2).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn embedded_text_retrieves_itself() {
    let corpus = parse_corpus(&std::fs::read(fixture("corpus_tables.json")).unwrap(), "tables").unwrap();
    let provider = HashEmbedder::default();
    let index = RetrievalIndex::build(&corpus, &provider).unwrap();
    for chunk in index.chunks() {
        let hits = index.search(&provider, &chunk.embedded_text(), &params(1)).unwrap().hits;
        assert_eq!(hits[0].chunk, chunk);
        assert!((hits[0].score - 1.0).abs() < 1e-9);
    }
}

#[test]
fn gibberish_is_low_confidence() {
    let corpus = parse_corpus(&std::fs::read(fixture("corpus_tables.json")).unwrap(), "tables").unwrap();
    let provider = HashEmbedder::default();
    let index = RetrievalIndex::build(&corpus, &provider).unwrap();
    let results = index.search(&provider, "zzqx qvv", &SearchParams::default()).unwrap();
    assert!(results.low_confidence);
    let results = index.search(&provider, "What are benefits of Hammer Sounding?", &SearchParams::default()).unwrap();
    assert!(!results.low_confidence);
}

#[test]
fn images_follow_hit_order() {
    let corpus = parse_corpus(&std::fs::read(fixture("corpus_tables.json")).unwrap(), "tables").unwrap();
    let provider = HashEmbedder::default();
    let index = RetrievalIndex::build(&corpus, &provider).unwrap();
    let pick = |id: u64, key: &str| {
        let chunk = index.chunks().iter().find(|c| c.record_id == id && c.section_key == key).unwrap();
        SearchHit { chunk, score: 0.5 }
    };
    let hammer = "https://infotechnology.fhwa.dot.gov/wp-content/uploads/2022/07/hammer-sounding.png";
    let mt = "https://infotechnology.fhwa.dot.gov/wp-content/uploads/2021/04/mt_1.jpg";
    assert_eq!(images_for(&corpus, &[pick(129, "summary"), pick(129, "advantages")], 6), vec![mt]);
    assert_eq!(images_for(&corpus, &[pick(2769, "summary"), pick(129, "summary")], 6), vec![hammer, mt]);
    assert!(images_for(&corpus, &[], 6).is_empty());
}

/// Maps every text to the same vector, so every score ties.
struct Constant;

impl EmbeddingProvider for Constant {
    fn identity(&self) -> &str {
        "constant"
    }
    fn dimension(&self) -> usize {
        4
    }
    fn embed(&self, _: &str) -> Result<EmbeddingVector, EmbeddingError> {
        infotech_core::embedding::normalize(&[1.0, 1.0, 0.0, 0.0])
    }
}

#[test]
fn ties_break_by_record_then_section() {
    let url = |s: &str| format!("https://infotechnology.fhwa.dot.gov/{s}/");
    let same = [("summary", "Identical text."), ("advantages", "Identical text."), ("limitations", "Identical text.")];
    let records = vec![
        TechnologyRecord::new(30, "Gamma", same, vec![], url("gamma")).unwrap(),
        TechnologyRecord::new(10, "Alpha", same, vec![], url("alpha")).unwrap(),
        TechnologyRecord::new(20, "Beta", same, vec![], url("beta")).unwrap(),
    ];
    let corpus = Corpus::new(records, "ties").unwrap();
    let index = RetrievalIndex::build(&corpus, &Constant).unwrap();
    let hits = index.search(&Constant, "anything", &params(9)).unwrap().hits;
    let order: Vec<(u64, &str)> = hits.iter().map(|h| (h.chunk.record_id, h.chunk.section_key.as_str())).collect();
    assert_eq!(
        order,
        vec![
            (10, "advantages"),
            (10, "limitations"),
            (10, "summary"),
            (20, "advantages"),
            (20, "limitations"),
            (20, "summary"),
            (30, "advantages"),
            (30, "limitations"),
            (30, "summary"),
        ]
    );
    let again = index.search(&Constant, "anything", &params(9)).unwrap().hits;
    assert_eq!(hits, again);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn larger_k_extends_smaller_k(seed in 0u64..1000, qi in 0usize..20, k in 1usize..20) {
        let doc = synthetic_corpus(12, seed);
        let provider = HashEmbedder::new(64).unwrap();
        let (_, index) = build(&doc, &provider);
        let query = &synthetic_queries(20, seed)[qi];
        let small = index.search(&provider, query, &params(k)).unwrap().hits;
        let large = index.search(&provider, query, &params(k + 1)).unwrap().hits;
        prop_assert_eq!(&large[..small.len()], &small[..]);
        prop_assert!(large.len() <= k + 1);
    }

    #[test]
    fn repeated_searches_agree(seed in 0u64..1000, qi in 0usize..20) {
        let doc = synthetic_corpus(8, seed);
        let provider = HashEmbedder::new(32).unwrap();
        let (_, index) = build(&doc, &provider);
        let query = &synthetic_queries(20, seed)[qi];
        let a = index.search(&provider, query, &params(5)).unwrap().hits;
        let b = index.search(&provider, query, &params(5)).unwrap().hits;
        prop_assert_eq!(a, b);
    }
}
