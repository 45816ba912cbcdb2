//! Turns fetched technology pages into [`TechnologyRecord`]s.
//!
//! Fetching and extraction are separate: [`PageFetcher`] supplies bytes
//! (from the network or from stored snapshots) and [`extract_record`] is a
//! pure function of those bytes and the page URL.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use regex::Regex;
use scraper::{ElementRef, Html, Node, Selector};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::corpus::{normalize_section_key, Corpus, CorpusError, TechnologyRecord, CANONICAL_SECTIONS};
use crate::embedding::fnv1a;

pub const DEFAULT_POLITENESS_DELAY: Duration = Duration::from_secs(1);
pub const DEFAULT_PARALLELISM: usize = 2;

const CONTENT_REGIONS: [&str; 5] = [".entry-content", "article", "main", "#content", "[role=main]"];
const BLOCK_TAGS: [&str; 14] = [
    "p", "li", "div", "br", "tr", "ul", "ol", "table", "section", "blockquote", "figure", "figcaption", "dd", "dt",
];

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("HTTP fetch of {url} failed: {message}")]
    Http { url: String, message: String },
    #[error("no fixture for {url} at {path}")]
    MissingFixture { url: String, path: PathBuf },
    #[error("{0}")]
    Injected(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("page {url} is not parseable HTML: {message}")]
    Unparseable { url: String, message: String },
    #[error("page {url} has no content region")]
    NoContentRegion { url: String },
    #[error("page {url} has no recognized section headings")]
    NoRecognizedHeadings { url: String },
    #[error("page {url} produced an invalid record: {source}")]
    InvalidRecord { url: String, source: CorpusError },
    #[error("crawl manifest is empty")]
    EmptyManifest,
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("every page failed ({} attempted)", .0.pages.len())]
    AllFailed(Box<CrawlReport>),
}

/// Source of raw page bytes.
pub trait PageFetcher: Send + Sync {
    fn fetch(&self, url: &Url) -> Result<Vec<u8>, FetchError>;

    /// Pause between consecutive requests issued by one crawl worker.
    fn politeness_delay(&self) -> Duration {
        Duration::ZERO
    }
}

pub struct HttpFetcher {
    agent: ureq::Agent,
    delay: Duration,
}

impl HttpFetcher {
    pub fn new(delay: Duration, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .user_agent("infotech-ingest/0.1")
            .build()
            .into();
        HttpFetcher { agent, delay }
    }
}

impl Default for HttpFetcher {
    fn default() -> Self {
        HttpFetcher::new(DEFAULT_POLITENESS_DELAY, Duration::from_secs(30))
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch(&self, url: &Url) -> Result<Vec<u8>, FetchError> {
        let http = |message: String| FetchError::Http { url: url.to_string(), message };
        self.agent
            .get(url.as_str())
            .call()
            .map_err(|e| http(e.to_string()))?
            .body_mut()
            .read_to_vec()
            .map_err(|e| http(e.to_string()))
    }

    fn politeness_delay(&self) -> Duration {
        self.delay
    }
}

/// Serves stored page snapshots: `https://host/some-page/` maps to
/// `<dir>/some-page.html`, the site root to `<dir>/index.html`.
#[derive(Debug, Clone)]
pub struct FixtureFetcher {
    dir: PathBuf,
}

impl FixtureFetcher {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureFetcher { dir: dir.into() }
    }

    pub fn path_for(&self, url: &Url) -> PathBuf {
        self.dir.join(format!("{}.html", url_slug(url).unwrap_or("index")))
    }
}

impl PageFetcher for FixtureFetcher {
    fn fetch(&self, url: &Url) -> Result<Vec<u8>, FetchError> {
        let path = self.path_for(url);
        std::fs::read(&path).map_err(|_| FetchError::MissingFixture { url: url.to_string(), path })
    }
}

/// Last non-empty path segment of `url`.
pub fn url_slug(url: &Url) -> Option<&str> {
    url.path_segments()?.filter(|s| !s.is_empty()).last()
}

/// `"hammer-sounding"` becomes `"Hammer Sounding"`.
pub fn name_from_slug(slug: &str) -> String {
    slug.split(['-', '_'])
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars).collect::<String>(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrawlManifest {
    #[serde(default)]
    pub root_url: Option<Url>,
    pub page_urls: Vec<Url>,
    #[serde(default)]
    pub expected_count: Option<usize>,
}

impl CrawlManifest {
    /// Drops repeated URLs, keeping the first occurrence.
    pub fn new(root_url: Option<Url>, page_urls: Vec<Url>, expected_count: Option<usize>) -> Self {
        let mut seen = HashSet::new();
        let page_urls = page_urls.into_iter().filter(|u| seen.insert(u.clone())).collect();
        CrawlManifest { root_url, page_urls, expected_count }
    }

    pub fn parse(document: &[u8]) -> Result<Self, IngestError> {
        let raw: CrawlManifest =
            serde_json::from_slice(document).map_err(|e| IngestError::Manifest(e.to_string()))?;
        Ok(CrawlManifest::new(raw.root_url, raw.page_urls, raw.expected_count))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PageOutcome {
    pub url: String,
    pub record_id: Option<u64>,
    pub error: Option<String>,
    pub elapsed: Duration,
}

impl PageOutcome {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrawlReport {
    pub pages: Vec<PageOutcome>,
    pub expected_count: Option<usize>,
    pub elapsed: Duration,
}

impl CrawlReport {
    pub fn succeeded(&self) -> usize {
        self.pages.iter().filter(|p| p.is_ok()).count()
    }

    pub fn failed(&self) -> usize {
        self.pages.len() - self.succeeded()
    }

    /// True when an expected count was given and the success count differs.
    pub fn shortfall(&self) -> bool {
        self.expected_count.is_some_and(|n| n != self.succeeded())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{}/{} pages ok", self.succeeded(), self.pages.len());
        if let Some(n) = self.expected_count {
            s.push_str(&format!(", expected {n}"));
            if self.shortfall() {
                s.push_str(" (SHORTFALL)");
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrawlOptions {
    pub parallelism: usize,
}

impl Default for CrawlOptions {
    fn default() -> Self {
        CrawlOptions { parallelism: DEFAULT_PARALLELISM }
    }
}

/// Fetches and extracts every manifest page. Failed pages are reported and
/// skipped; only a crawl where nothing succeeds is an error.
pub fn crawl(
    manifest: &CrawlManifest,
    fetcher: &dyn PageFetcher,
    options: CrawlOptions,
) -> Result<(Corpus, CrawlReport), IngestError> {
    if manifest.page_urls.is_empty() {
        return Err(IngestError::EmptyManifest);
    }
    let started = Instant::now();
    let urls = &manifest.page_urls;
    let results: Vec<Mutex<Option<(Result<TechnologyRecord, String>, Duration)>>> =
        urls.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = options.parallelism.clamp(1, urls.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut first = true;
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= urls.len() {
                        break;
                    }
                    if !first {
                        std::thread::sleep(fetcher.politeness_delay());
                    }
                    first = false;
                    let clock = Instant::now();
                    let outcome = fetcher
                        .fetch(&urls[i])
                        .map_err(|e| e.to_string())
                        .and_then(|bytes| extract_record(&bytes, &urls[i]).map_err(|e| e.to_string()));
                    *results[i].lock().expect("result slot") = Some((outcome, clock.elapsed()));
                }
            });
        }
    });

    // Single collector, in manifest order, so id/name conflicts resolve
    // deterministically in favour of the earlier page.
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    let mut names = HashSet::new();
    let mut pages = Vec::with_capacity(urls.len());
    for (url, slot) in urls.iter().zip(results) {
        let (outcome, elapsed) = slot.into_inner().expect("result slot").expect("every url visited");
        let outcome = outcome.and_then(|record| {
            if !ids.insert(record.id) {
                Err(format!("duplicate id {} (name {:?})", record.id, record.name))
            } else if !names.insert(record.name.to_lowercase()) {
                Err(format!("duplicate name {:?} (id {})", record.name, record.id))
            } else {
                Ok(record)
            }
        });
        pages.push(match outcome {
            Ok(record) => {
                let id = record.id;
                records.push(record);
                PageOutcome { url: url.to_string(), record_id: Some(id), error: None, elapsed }
            }
            Err(error) => PageOutcome { url: url.to_string(), record_id: None, error: Some(error), elapsed },
        });
    }
    let report = CrawlReport { pages, expected_count: manifest.expected_count, elapsed: started.elapsed() };
    if records.is_empty() {
        return Err(IngestError::AllFailed(Box::new(report)));
    }
    let label = manifest
        .root_url
        .as_ref()
        .map_or_else(|| "crawl manifest".to_string(), Url::to_string);
    let corpus = Corpus::new(records, label).expect("collector enforces corpus invariants");
    Ok((corpus, report))
}

fn selector(css: &str) -> Selector {
    Selector::parse(css).expect("static selector")
}

fn content_region<'a>(doc: &'a Html) -> Option<ElementRef<'a>> {
    CONTENT_REGIONS
        .iter()
        .find_map(|css| doc.select(&selector(css)).next())
}

fn is_heading(tag: &str) -> bool {
    matches!(tag, "h2" | "h3" | "h4" | "h5" | "h6")
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn clean_section(raw: &str) -> String {
    raw.lines()
        .map(collapse)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

fn post_id(html: &str) -> Option<u64> {
    static PATTERNS: OnceLock<[Regex; 3]> = OnceLock::new();
    let patterns = PATTERNS.get_or_init(|| {
        [
            Regex::new(r#"\bpostid-(\d+)\b"#).unwrap(),
            Regex::new(r#"id=["']post-(\d+)["']"#).unwrap(),
            Regex::new(r#"rel=["']shortlink["'][^>]*[?&]p=(\d+)"#).unwrap(),
        ]
    });
    patterns.iter().find_map(|re| {
        re.captures(html)
            .and_then(|c| c[1].parse::<u64>().ok())
            .filter(|id| *id > 0)
    })
}

/// Positive id derived from the page URL, for pages without a post id.
pub fn hashed_id(page_url: &Url) -> u64 {
    fnv1a(page_url.as_str().as_bytes()) % 2_147_483_647 + 1
}

fn page_name(doc: &Html, page_url: &Url) -> Option<String> {
    let h1 = doc
        .select(&selector("h1"))
        .map(|h| collapse(&h.text().collect::<String>()))
        .find(|t| !t.is_empty());
    if h1.is_some() {
        return h1;
    }
    let title = doc
        .select(&selector("title"))
        .next()
        .map(|t| collapse(&t.text().collect::<String>()))
        .unwrap_or_default();
    let first = [" | ", " – ", " — ", " - "]
        .iter()
        .fold(title.as_str(), |acc, sep| acc.split(sep).next().unwrap_or(acc))
        .trim()
        .to_string();
    if !first.is_empty() {
        return Some(first);
    }
    url_slug(page_url).map(name_from_slug).filter(|n| !n.is_empty())
}

/// Builds a record from one page's heading/content structure.
pub fn extract_record(page: &[u8], page_url: &Url) -> Result<TechnologyRecord, IngestError> {
    let url = page_url.to_string();
    let text = std::str::from_utf8(page).map_err(|e| IngestError::Unparseable {
        url: url.clone(),
        message: e.to_string(),
    })?;
    let doc = Html::parse_document(text);
    let region = content_region(&doc).ok_or_else(|| IngestError::NoContentRegion { url: url.clone() })?;

    let mut sections: Vec<(String, String)> = Vec::new();
    for node in region.descendants() {
        match node.value() {
            Node::Element(el) if is_heading(el.name()) => {
                let heading = ElementRef::wrap(node).expect("element node");
                let key = normalize_section_key(&heading.text().collect::<String>());
                if !key.is_empty() {
                    sections.push((key, String::new()));
                }
            }
            Node::Element(el) if BLOCK_TAGS.contains(&el.name()) => {
                if let Some((_, buf)) = sections.last_mut() {
                    buf.push('\n');
                }
            }
            Node::Text(t) => {
                let skip = node.ancestors().any(|a| {
                    a.value()
                        .as_element()
                        .is_some_and(|e| is_heading(e.name()) || matches!(e.name(), "script" | "style" | "noscript"))
                });
                if !skip {
                    if let Some((_, buf)) = sections.last_mut() {
                        // Line breaks inside a text node are layout, not structure.
                        buf.extend(t.chars().map(|c| if c.is_whitespace() { ' ' } else { c }));
                    }
                }
            }
            _ => {}
        }
    }
    if !sections.iter().any(|(k, _)| CANONICAL_SECTIONS.contains(&k.as_str())) {
        return Err(IngestError::NoRecognizedHeadings { url });
    }
    // Repeated headings merge into one section.
    let mut merged: Vec<(String, String)> = Vec::new();
    for (key, raw) in sections {
        let content = clean_section(&raw);
        if content.is_empty() {
            continue;
        }
        match merged.iter_mut().find(|(k, _)| *k == key) {
            Some((_, existing)) => {
                existing.push('\n');
                existing.push_str(&content);
            }
            None => merged.push((key, content)),
        }
    }

    let mut images: Vec<String> = Vec::new();
    for img in region.select(&selector("img")) {
        let src = img
            .value()
            .attr("src")
            .filter(|s| !s.trim().is_empty() && !s.starts_with("data:"))
            .or_else(|| img.value().attr("data-src"));
        let Some(src) = src else { continue };
        if let Ok(abs) = page_url.join(src.trim()) {
            let abs = abs.to_string();
            if !images.contains(&abs) {
                images.push(abs);
            }
        }
    }

    let name = page_name(&doc, page_url).unwrap_or_else(|| url.clone());
    let id = post_id(text).unwrap_or_else(|| hashed_id(page_url));
    TechnologyRecord::new(id, name, merged, images, url.clone())
        .map_err(|source| IngestError::InvalidRecord { url, source })
}

/// Best-effort discovery of technology pages linked from a listing page:
/// same-host links inside the content region, excluding the listing itself.
pub fn discover_pages(listing: &[u8], root_url: &Url) -> Result<Vec<Url>, IngestError> {
    let text = std::str::from_utf8(listing).map_err(|e| IngestError::Unparseable {
        url: root_url.to_string(),
        message: e.to_string(),
    })?;
    let doc = Html::parse_document(text);
    let region = content_region(&doc).ok_or_else(|| IngestError::NoContentRegion { url: root_url.to_string() })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for a in region.select(&selector("a[href]")) {
        let Some(href) = a.value().attr("href") else { continue };
        let Ok(mut u) = root_url.join(href) else { continue };
        u.set_fragment(None);
        if u.host_str() != root_url.host_str() || u.path() == root_url.path() || url_slug(&u).is_none() {
            continue;
        }
        if seen.insert(u.clone()) {
            out.push(u);
        }
    }
    Ok(out)
}

/// Reads a fixture directory's HTML files into a manifest rooted at `base`.
pub fn manifest_from_fixtures(dir: &Path, base: &Url) -> Result<CrawlManifest, IngestError> {
    let mut slugs: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| IngestError::Manifest(format!("{}: {e}", dir.display())))?
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".html").map(str::to_string)
        })
        .filter(|s| s != "index")
        .collect();
    slugs.sort();
    let urls = slugs
        .iter()
        .map(|s| base.join(&format!("{s}/")))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| IngestError::Manifest(e.to_string()))?;
    Ok(CrawlManifest::new(Some(base.clone()), urls, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAGE: &str = r#"<!doctype html>
<html><head><title>Acoustic Probe | InfoTechnology</title></head>
<body class="post-template postid-4410">
<h1 class="entry-title">Acoustic Probe</h1>
<div class="entry-content">
  <p>Intro text before any heading.</p>
  <h2>Description</h2>
  <p>The probe <strong>listens</strong> for
     echoes.</p>
  <p>Second paragraph.</p>
  <img src="/wp-content/uploads/2021/04/probe.png">
  <h3>Advantages</h3>
  <ul><li>Fast</li><li>Cheap</li></ul>
  <img src="https://cdn.example.org/probe.png">
  <img src="/wp-content/uploads/2021/04/probe.png">
  <h2>Field Notes</h2>
  <p>Works in rain.</p>
  <h2>Limitations</h2>
  <script>var x = 1;</script>
</div></body></html>"#;

    fn url(s: &str) -> Url {
        Url::parse(s).unwrap()
    }

    #[test]
    fn extracts_sections_images_name_and_id() {
        let page_url = url("https://infotechnology.fhwa.dot.gov/acoustic-probe/");
        let r = extract_record(PAGE.as_bytes(), &page_url).unwrap();
        assert_eq!(r.id, 4410);
        assert_eq!(r.name, "Acoustic Probe");
        let keys: Vec<&str> = r.sections.keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, ["description", "advantages", "field_notes"]);
        assert_eq!(r.section("description").unwrap(), "The probe listens for echoes.\nSecond paragraph.");
        assert_eq!(r.section("advantages").unwrap(), "Fast\nCheap");
        assert_eq!(
            r.images,
            [
                "https://infotechnology.fhwa.dot.gov/wp-content/uploads/2021/04/probe.png",
                "https://cdn.example.org/probe.png"
            ]
        );
        assert_eq!(r.text_url, page_url.as_str());
    }

    #[test]
    fn extraction_is_deterministic_with_hashed_id() {
        let page = PAGE.replace("postid-4410", "single");
        let u = url("https://example.org/acoustic-probe/");
        let a = extract_record(page.as_bytes(), &u).unwrap();
        let b = extract_record(page.as_bytes(), &u).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id, hashed_id(&u));
        assert!(a.id >= 1);
    }

    #[test]
    fn name_falls_back_to_title_then_slug() {
        let no_h1 = PAGE.replace(r#"<h1 class="entry-title">Acoustic Probe</h1>"#, "");
        let u = url("https://example.org/acoustic-probe/");
        assert_eq!(extract_record(no_h1.as_bytes(), &u).unwrap().name, "Acoustic Probe");
        let bare = no_h1.replace("<title>Acoustic Probe | InfoTechnology</title>", "");
        let u = url("https://example.org/hammer-sounding/");
        assert_eq!(extract_record(bare.as_bytes(), &u).unwrap().name, "Hammer Sounding");
    }

    #[test]
    fn slug_names() {
        assert_eq!(name_from_slug("hammer-sounding"), "Hammer Sounding");
        assert_eq!(name_from_slug("magnetic_particle-testing-mt"), "Magnetic Particle Testing Mt");
    }

    #[test]
    fn no_recognized_headings_is_an_error() {
        let page = r#"<html><head><title>Thing</title></head><body><article><h2>Related</h2><p>x</p></article></body></html>"#;
        let err = extract_record(page.as_bytes(), &url("https://example.org/thing/")).unwrap_err();
        assert!(matches!(err, IngestError::NoRecognizedHeadings { .. }));
    }

    #[test]
    fn missing_content_region_names_url() {
        let page = "<html><body><p>nothing</p></body></html>";
        let err = extract_record(page.as_bytes(), &url("https://example.org/empty/")).unwrap_err();
        assert_eq!(err.to_string(), "page https://example.org/empty/ has no content region");
    }

    #[test]
    fn invalid_utf8_is_unparseable() {
        let err = extract_record(&[0xff, 0xfe, 0x00], &url("https://example.org/x/")).unwrap_err();
        assert!(matches!(err, IngestError::Unparseable { .. }));
    }

    #[test]
    fn manifest_dedups_in_order() {
        let m = CrawlManifest::new(
            None,
            vec![url("https://e.org/a/"), url("https://e.org/b/"), url("https://e.org/a/")],
            None,
        );
        assert_eq!(m.page_urls, [url("https://e.org/a/"), url("https://e.org/b/")]);
        let parsed = CrawlManifest::parse(br#"{"page_urls":["https://e.org/a/","https://e.org/a/"],"expected_count":1}"#).unwrap();
        assert_eq!(parsed.page_urls.len(), 1);
        assert!(CrawlManifest::parse(br#"{"page_urls":["/relative"]}"#).is_err());
    }

    #[test]
    fn discovery_keeps_same_host_pages() {
        let listing = r#"<html><body><main>
            <a href="/hammer-sounding/">Hammer</a>
            <a href="/hammer-sounding/#top">Hammer again</a>
            <a href="https://other.org/x/">Elsewhere</a>
            <a href="/bridge/">Self</a>
            <a href="/impact-echo/">IE</a>
        </main></body></html>"#;
        let root = url("https://infotechnology.fhwa.dot.gov/bridge/");
        let found = discover_pages(listing.as_bytes(), &root).unwrap();
        assert_eq!(
            found,
            [
                url("https://infotechnology.fhwa.dot.gov/hammer-sounding/"),
                url("https://infotechnology.fhwa.dot.gov/impact-echo/")
            ]
        );
    }

    #[test]
    fn empty_manifest_rejected() {
        let m = CrawlManifest::new(None, vec![], None);
        let err = crawl(&m, &FixtureFetcher::new("/nonexistent"), CrawlOptions::default()).unwrap_err();
        assert!(matches!(err, IngestError::EmptyManifest));
    }
}
