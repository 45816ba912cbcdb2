//! Benchmark harness: similarity scoring, threshold classification, set
//! accuracy, latency capture and report rendering.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingProvider};

pub const DEFAULT_THRESHOLD: f64 = 0.85;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation cases")]
    NoCases,
    #[error("case {index}: {message}")]
    InvalidCase { index: usize, message: String },
    #[error("threshold must be in (0, 1], got {0}")]
    Threshold(f64),
    #[error("accuracy of an empty status list is undefined")]
    EmptyStatuses,
    #[error("scoring failed: {0}")]
    Scoring(#[from] EmbeddingError),
    #[error("cannot parse case file: {0}")]
    CaseFile(String),
    #[error("unknown {kind} {value:?}")]
    UnknownName { kind: &'static str, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub question: String,
    pub expected_answer: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

pub fn parse_cases(document: &[u8]) -> Result<Vec<EvalCase>, EvalError> {
    let cases: Vec<EvalCase> =
        serde_json::from_slice(document).map_err(|e| EvalError::CaseFile(e.to_string()))?;
    validate_cases(&cases)?;
    Ok(cases)
}

fn validate_cases(cases: &[EvalCase]) -> Result<(), EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    for (index, case) in cases.iter().enumerate() {
        if case.question.trim().is_empty() {
            return Err(EvalError::InvalidCase { index, message: "empty question".into() });
        }
        if case.expected_answer.trim().is_empty() {
            return Err(EvalError::InvalidCase { index, message: "empty expected_answer".into() });
        }
    }
    Ok(())
}

/// Which response channel gets scored against the expected answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Bot,
    Llm,
    /// Bot text followed by the LLM text.
    #[serde(alias = "concatenated")]
    Both,
}

impl FromStr for Target {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bot" => Ok(Target::Bot),
            "llm" => Ok(Target::Llm),
            "both" | "concatenated" => Ok(Target::Both),
            other => Err(EvalError::UnknownName { kind: "target", value: other.into() }),
        }
    }
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Bot => "bot",
            Target::Llm => "llm",
            Target::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub target: Target,
    /// When false (the default) errored rows stay in the denominator as
    /// Incorrect.
    pub exclude_errored: bool,
    pub model_label: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_THRESHOLD,
            target: Target::Llm,
            exclude_errored: false,
            model_label: "unlabeled".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Correct,
    Incorrect,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Correct => "Correct",
            Status::Incorrect => "Incorrect",
        }
    }
}

/// Correct iff the similarity meets or exceeds the threshold.
pub fn classify(similarity: f64, threshold: f64) -> Status {
    if similarity >= threshold {
        Status::Correct
    } else {
        Status::Incorrect
    }
}

/// `100 × correct / total`.
pub fn accuracy(statuses: &[Status]) -> Result<f64, EvalError> {
    if statuses.is_empty() {
        return Err(EvalError::EmptyStatuses);
    }
    let correct = statuses.iter().filter(|s| **s == Status::Correct).count();
    Ok(percent(correct, statuses.len()))
}

fn percent(correct: usize, total: usize) -> f64 {
    (correct as f64 * 100.0) / total as f64
}

pub fn score_response(
    expected: &str,
    actual: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<f64, EvalError> {
    let e = provider.embed(expected)?;
    let a = provider.embed(actual)?;
    Ok(cosine_similarity(&e, &a)?)
}

/// What the system under test returned for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemAnswer {
    pub bot: String,
    #[serde(default)]
    pub llm: Option<String>,
}

/// Reads a JSON array of recorded answers, one per case.
pub fn parse_answers(document: &[u8]) -> Result<Vec<SystemAnswer>, EvalError> {
    serde_json::from_slice(document).map_err(|e| EvalError::CaseFile(e.to_string()))
}

pub fn serialize_answers(answers: &[SystemAnswer]) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(answers).expect("answers serialize");
    out.push(b'\n');
    out
}

impl SystemAnswer {
    fn channel(&self, target: Target) -> Result<String, String> {
        match target {
            Target::Bot => Ok(self.bot.clone()),
            Target::Llm => self
                .llm
                .clone()
                .ok_or_else(|| "no LLM response (degraded)".to_string()),
            Target::Both => Ok(match &self.llm {
                Some(llm) => format!("{}\n\n{}", self.bot, llm),
                None => self.bot.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub question: String,
    pub similarity: Option<f64>,
    pub status: Status,
    #[serde(with = "millis")]
    pub latency: Duration,
    pub error: Option<String>,
}

impl EvalRow {
    pub fn is_errored(&self) -> bool {
        self.error.is_some()
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Duration::try_from_secs_f64(ms / 1000.0).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<EvalRow>,
    pub accuracy_percent: f64,
    pub model_label: String,
    pub provider_identity: String,
    pub threshold: f64,
    pub target: Target,
    pub exclude_errored: bool,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySummary {
    pub min: Duration,
    pub median: Duration,
    pub max: Duration,
}

impl EvaluationReport {
    pub fn correct_count(&self) -> usize {
        self.rows.iter().filter(|r| r.status == Status::Correct).count()
    }

    /// Rows that enter the accuracy denominator.
    pub fn scored_count(&self) -> usize {
        if self.exclude_errored {
            self.rows.iter().filter(|r| !r.is_errored()).count()
        } else {
            self.rows.len()
        }
    }

    /// Recomputes accuracy from the rows.
    pub fn recompute_accuracy(&self) -> f64 {
        match self.scored_count() {
            0 => 0.0,
            n => percent(self.correct_count(), n),
        }
    }

    pub fn latency_summary(&self) -> Option<LatencySummary> {
        let mut lat: Vec<Duration> = self.rows.iter().map(|r| r.latency).collect();
        if lat.is_empty() {
            return None;
        }
        lat.sort();
        let n = lat.len();
        let median = if n % 2 == 1 {
            lat[n / 2]
        } else {
            (lat[n / 2 - 1] + lat[n / 2]) / 2
        };
        Some(LatencySummary { min: lat[0], median, max: lat[n - 1] })
    }
}

fn check_threshold(threshold: f64) -> Result<(), EvalError> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::Threshold(threshold))
    }
}

fn score_row(
    case: &EvalCase,
    outcome: Result<SystemAnswer, String>,
    latency: Duration,
    provider: &dyn EmbeddingProvider,
    config: &EvalConfig,
) -> EvalRow {
    let scored = outcome
        .and_then(|answer| answer.channel(config.target))
        .and_then(|text| {
            score_response(&case.expected_answer, &text, provider).map_err(|e| e.to_string())
        });
    match scored {
        Ok(similarity) => EvalRow {
            question: case.question.clone(),
            similarity: Some(similarity),
            status: classify(similarity, config.threshold),
            latency,
            error: None,
        },
        Err(error) => EvalRow {
            question: case.question.clone(),
            similarity: None,
            status: Status::Incorrect,
            latency,
            error: Some(error),
        },
    }
}

fn finish(
    rows: Vec<EvalRow>,
    provider: &dyn EmbeddingProvider,
    config: &EvalConfig,
    started_at: DateTime<Utc>,
) -> EvaluationReport {
    let mut report = EvaluationReport {
        rows,
        accuracy_percent: 0.0,
        model_label: config.model_label.clone(),
        provider_identity: provider.identity().to_string(),
        threshold: config.threshold,
        target: config.target,
        exclude_errored: config.exclude_errored,
        started_at,
        finished_at: Utc::now(),
    };
    report.accuracy_percent = report.recompute_accuracy();
    report
}

/// Runs every case through `system` in order, timing each call. A failing
/// case becomes an errored row; the run never stops early.
pub fn run_benchmark<F>(
    cases: &[EvalCase],
    mut system: F,
    provider: &dyn EmbeddingProvider,
    config: &EvalConfig,
) -> Result<EvaluationReport, EvalError>
where
    F: FnMut(&str) -> Result<SystemAnswer, String>,
{
    validate_cases(cases)?;
    check_threshold(config.threshold)?;
    let started_at = Utc::now();
    let rows = cases
        .iter()
        .map(|case| {
            let clock = Instant::now();
            let outcome = system(&case.question);
            let latency = clock.elapsed();
            score_row(case, outcome, latency, provider, config)
        })
        .collect();
    Ok(finish(rows, provider, config, started_at))
}

/// Scores recorded answers without re-running the system, spreading the
/// work over `workers` threads. Latencies are reported as zero.
pub fn rescore_recorded(
    cases: &[EvalCase],
    answers: &[SystemAnswer],
    provider: &dyn EmbeddingProvider,
    config: &EvalConfig,
    workers: usize,
) -> Result<EvaluationReport, EvalError> {
    validate_cases(cases)?;
    check_threshold(config.threshold)?;
    if answers.len() != cases.len() {
        return Err(EvalError::CaseFile(format!(
            "{} cases but {} recorded answers",
            cases.len(),
            answers.len()
        )));
    }
    let started_at = Utc::now();
    let per_worker = cases.len().div_ceil(workers.max(1));
    let rows: Vec<EvalRow> = std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .chunks(per_worker)
            .zip(answers.chunks(per_worker))
            .map(|(cs, ans)| {
                scope.spawn(move || {
                    cs.iter()
                        .zip(ans)
                        .map(|(c, a)| score_row(c, Ok(a.clone()), Duration::ZERO, provider, config))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    });
    Ok(finish(rows, provider, config, started_at))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    ChartData,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "chart-data" => Ok(ReportFormat::ChartData),
            other => Err(EvalError::UnknownName { kind: "format", value: other.into() }),
        }
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "no",
    "question",
    "similarity",
    "status",
    "latency_ms",
    "accuracy_percent",
    "note",
];

fn ms(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1000.0)
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn emit_report(report: &EvaluationReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Table => emit_table(report).into_bytes(),
        ReportFormat::Csv => emit_csv(report),
        ReportFormat::ChartData => emit_chart_data(report),
    }
}

fn emit_table(report: &EvaluationReport) -> String {
    let header = ["No.", "Question", "Similarity", "Status", "Latency (ms)"];
    let body: Vec<[String; 5]> = report
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            [
                (i + 1).to_string(),
                r.question.clone(),
                r.similarity.map_or_else(|| "error".to_string(), |s| format!("{s:.2}")),
                r.status.as_str().to_string(),
                ms(r.latency),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut s = String::from("|");
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - cell.chars().count();
            // Question column is left-aligned, numbers right-aligned.
            if i == 1 || i == 3 {
                let _ = write!(s, " {cell}{} |", " ".repeat(pad));
            } else {
                let _ = write!(s, " {}{cell} |", " ".repeat(pad));
            }
        }
        s.push('\n');
        s
    };
    let rule: String = {
        let mut s = String::from("+");
        for w in widths {
            s.push_str(&"-".repeat(w + 2));
            s.push('+');
        }
        s.push('\n');
        s
    };
    let mut out = format!(
        "Model: {}   Provider: {}   Target: {}   Threshold: {}\n",
        report.model_label,
        report.provider_identity,
        report.target.as_str(),
        report.threshold
    );
    out.push_str(&rule);
    out.push_str(&line(&header.map(String::from)));
    out.push_str(&rule);
    for row in &body {
        out.push_str(&line(row));
    }
    out.push_str(&rule);
    let _ = writeln!(
        out,
        "Overall accuracy: {:.2}% ({}/{} correct)",
        report.accuracy_percent,
        report.correct_count(),
        report.scored_count()
    );
    if let Some(l) = report.latency_summary() {
        let _ = writeln!(
            out,
            "Latency (ms): min {} / median {} / max {}",
            ms(l.min),
            ms(l.median),
            ms(l.max)
        );
    }
    out
}

fn emit_csv(report: &EvaluationReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv write");
    for (i, r) in report.rows.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.question.clone(),
            r.similarity.map(|s| s.to_string()).unwrap_or_default(),
            r.status.as_str().to_string(),
            ms(r.latency),
            String::new(),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory csv write");
    }
    let median = report.latency_summary().map(|l| ms(l.median)).unwrap_or_default();
    w.write_record([
        "overall".to_string(),
        report.model_label.clone(),
        String::new(),
        format!("{}/{}", report.correct_count(), report.scored_count()),
        median,
        report.accuracy_percent.to_string(),
        format!(
            "threshold={} target={} provider={} started={} finished={}",
            report.threshold,
            report.target.as_str(),
            report.provider_identity,
            timestamp(report.started_at),
            timestamp(report.finished_at)
        ),
    ])
    .expect("in-memory csv write");
    w.into_inner().expect("in-memory csv flush")
}

#[derive(Serialize)]
struct ChartData<'a> {
    model: &'a str,
    threshold: f64,
    accuracy_percent: f64,
    series: Vec<Series>,
}

#[derive(Serialize)]
struct Series {
    name: &'static str,
    points: Vec<Point>,
}

#[derive(Serialize)]
struct Point {
    x: usize,
    y: Option<f64>,
}

fn emit_chart_data(report: &EvaluationReport) -> Vec<u8> {
    let n = report.rows.len();
    let chart = ChartData {
        model: &report.model_label,
        threshold: report.threshold,
        accuracy_percent: report.accuracy_percent,
        series: vec![
            Series {
                name: "similarity",
                points: report
                    .rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| Point { x: i + 1, y: r.similarity })
                    .collect(),
            },
            Series {
                name: "overall_accuracy",
                points: (1..=n)
                    .map(|x| Point { x, y: Some(report.accuracy_percent) })
                    .collect(),
            },
        ],
    };
    let mut out = serde_json::to_vec_pretty(&chart).expect("chart data serializes");
    out.push(b'\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use proptest::prelude::*;

    fn case(q: &str, a: &str) -> EvalCase {
        EvalCase { question: q.into(), expected_answer: a.into(), tags: vec![] }
    }

    #[test]
    fn classify_boundaries() {
        assert_eq!(classify(0.94, 0.85), Status::Correct);
        assert_eq!(classify(0.85, 0.85), Status::Correct);
        assert_eq!(classify(0.8499, 0.85), Status::Incorrect);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[Status::Correct; 15]).unwrap(), 100.0);
        let mut s = vec![Status::Correct; 14];
        s.push(Status::Incorrect);
        assert_eq!(accuracy(&s).unwrap(), 1400.0 / 15.0);
        assert!(matches!(accuracy(&[]), Err(EvalError::EmptyStatuses)));
    }

    #[test]
    fn identical_texts_score_one() {
        let p = HashEmbedder::default();
        let s = score_response("Eddy currents find cracks", "Eddy currents find cracks", &p).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn paraphrase_outscores_disjoint() {
        let p = HashEmbedder::default();
        let expected = "impact echo sends stress waves into concrete to find delaminations and voids";
        // Shares 80 % of tokens with `expected`.
        let para = "impact echo sends stress waves into concrete slabs to locate delaminations and cracks";
        let disjoint = "magnetometer readings detect ferrous tendon corrosion beneath bridge decks quickly";
        let a = score_response(expected, para, &p).unwrap();
        let b = score_response(expected, disjoint, &p).unwrap();
        assert!(a > b, "{a} <= {b}");
        assert!(b < 0.3);
    }

    #[test]
    fn failing_system_gives_errored_row() {
        let p = HashEmbedder::default();
        let cases = [case("q", "a")];
        let report = run_benchmark(&cases, |_| Err("boom".into()), &p, &EvalConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].is_errored());
        assert_eq!(report.rows[0].status, Status::Incorrect);
        assert_eq!(report.accuracy_percent, 0.0);
    }

    #[test]
    fn excluded_errored_rows_leave_denominator() {
        let p = HashEmbedder::default();
        let cases = [case("good", "same text"), case("bad", "other")];
        let config = EvalConfig { exclude_errored: true, target: Target::Bot, ..Default::default() };
        let report = run_benchmark(
            &cases,
            |q| if q == "good" { Ok(SystemAnswer { bot: "same text".into(), llm: None }) } else { Err("x".into()) },
            &p,
            &config,
        )
        .unwrap();
        assert_eq!(report.accuracy_percent, 100.0);
    }

    #[test]
    fn llm_target_with_missing_summary_is_errored() {
        let p = HashEmbedder::default();
        let cases = [case("q", "a b c")];
        let report = run_benchmark(
            &cases,
            |_| Ok(SystemAnswer { bot: "a b c".into(), llm: None }),
            &p,
            &EvalConfig::default(),
        )
        .unwrap();
        assert!(report.rows[0].error.as_deref().unwrap().contains("degraded"));
        let both = EvalConfig { target: Target::Both, ..Default::default() };
        let report = run_benchmark(
            &cases,
            |_| Ok(SystemAnswer { bot: "a b c".into(), llm: None }),
            &p,
            &both,
        )
        .unwrap();
        assert_eq!(report.rows[0].status, Status::Correct);
    }

    #[test]
    fn rejects_empty_cases_and_bad_threshold() {
        let p = HashEmbedder::default();
        let ok = |_: &str| Ok(SystemAnswer { bot: "x".into(), llm: Some("x".into()) });
        assert!(matches!(run_benchmark(&[], ok, &p, &EvalConfig::default()), Err(EvalError::NoCases)));
        let bad = EvalConfig { threshold: 0.0, ..Default::default() };
        assert!(matches!(run_benchmark(&[case("q", "a")], ok, &p, &bad), Err(EvalError::Threshold(_))));
        assert!(matches!(
            run_benchmark(&[case(" ", "a")], ok, &p, &EvalConfig::default()),
            Err(EvalError::InvalidCase { index: 0, .. })
        ));
    }

    #[test]
    fn parallel_rescore_matches_sequential() {
        let p = HashEmbedder::default();
        let cases: Vec<EvalCase> = (0..9)
            .map(|i| case(&format!("question {i}"), &format!("answer about topic {i} and crack depth")))
            .collect();
        let answers: Vec<SystemAnswer> = (0..9)
            .map(|i| SystemAnswer { bot: String::new(), llm: Some(format!("topic {i} crack answer")) })
            .collect();
        let config = EvalConfig::default();
        let par = rescore_recorded(&cases, &answers, &p, &config, 4).unwrap();
        let seq = run_benchmark(&cases, |q| {
            let i: usize = q.trim_start_matches("question ").parse().unwrap();
            Ok(answers[i].clone())
        }, &p, &config)
        .unwrap();
        let sims = |r: &EvaluationReport| r.rows.iter().map(|x| x.similarity).collect::<Vec<_>>();
        assert_eq!(sims(&par), sims(&seq));
        assert_eq!(par.accuracy_percent, seq.accuracy_percent);
    }

    fn sample_report(sims: &[f64]) -> EvaluationReport {
        let rows: Vec<EvalRow> = sims
            .iter()
            .enumerate()
            .map(|(i, s)| EvalRow {
                question: format!("Question {}, with comma?", i + 1),
                similarity: Some(*s),
                status: classify(*s, 0.85),
                latency: Duration::from_micros(1500 + i as u64 * 250),
                error: None,
            })
            .collect();
        let mut r = EvaluationReport {
            rows,
            accuracy_percent: 0.0,
            model_label: "stub".into(),
            provider_identity: "hash".into(),
            threshold: 0.85,
            target: Target::Llm,
            exclude_errored: false,
            started_at: Utc::now(),
            finished_at: Utc::now(),
        };
        r.accuracy_percent = r.recompute_accuracy();
        r
    }

    #[test]
    fn table_has_header_rows_and_overall_line() {
        let text = String::from_utf8(emit_report(&sample_report(&[0.94, 0.80]), ReportFormat::Table)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[2].contains("Question") && lines[2].contains("Similarity"));
        assert!(lines[4].contains(" 0.94 | Correct "));
        assert!(lines[5].contains(" 0.80 | Incorrect "));
        assert!(text.contains("Overall accuracy: 50.00% (1/2 correct)"));
        let widths: Vec<usize> = lines[1..7].iter().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "misaligned: {widths:?}");
    }

    #[test]
    fn csv_round_trips_numbers() {
        let sims: Vec<f64> = (0..15).map(|i| 0.80 + i as f64 * 0.0123456789).collect();
        let report = sample_report(&sims);
        let bytes = emit_report(&report, ReportFormat::Csv);
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
        let records: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), 16);
        for (rec, row) in records.iter().zip(&report.rows) {
            assert_eq!(rec[1], row.question);
            assert_eq!(rec[2].parse::<f64>().unwrap(), row.similarity.unwrap());
            assert_eq!(rec[3], *row.status.as_str());
            let lat: f64 = rec[4].parse().unwrap();
            assert!((lat - row.latency.as_secs_f64() * 1000.0).abs() < 5e-4);
        }
        let summary = &records[15];
        assert_eq!(&summary[0], "overall");
        assert_eq!(summary[5].parse::<f64>().unwrap(), report.accuracy_percent);
    }

    #[test]
    fn chart_data_has_constant_accuracy_series() {
        let report = sample_report(&[0.9, 0.8, 0.95]);
        let v: serde_json::Value = serde_json::from_slice(&emit_report(&report, ReportFormat::ChartData)).unwrap();
        let series = v["series"].as_array().unwrap();
        assert_eq!(series[0]["points"].as_array().unwrap().len(), 3);
        let acc = series[1]["points"].as_array().unwrap();
        assert_eq!(acc.len(), 3);
        for p in acc {
            assert_eq!(p["y"].as_f64().unwrap(), report.accuracy_percent);
        }
    }

    #[test]
    fn latency_summary_uses_median() {
        let report = sample_report(&[0.9, 0.9, 0.9, 0.9]);
        let l = report.latency_summary().unwrap();
        assert_eq!(l.min, Duration::from_micros(1500));
        assert_eq!(l.median, Duration::from_micros(1875));
        assert_eq!(l.max, Duration::from_micros(2250));
    }

    #[test]
    fn parse_case_file() {
        let doc = br#"[{"question":"What is MT?","expected_answer":"Magnetic particle testing.","tags":["steel"]}]"#;
        let cases = parse_cases(doc).unwrap();
        assert_eq!(cases[0].tags, ["steel"]);
        assert!(parse_cases(b"[]").is_err());
        assert!(parse_cases(b"{").is_err());
    }

    proptest! {
        #[test]
        fn classify_meets_boundary(t in 0.0001f64..=1.0) {
            prop_assert_eq!(classify(t, t), Status::Correct);
        }

        #[test]
        fn accuracy_non_increasing_in_threshold(
            sims in prop::collection::vec(-1.0f64..=1.0, 1..40),
            t1 in 0.001f64..=1.0,
            t2 in 0.001f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let at = |t: f64| accuracy(&sims.iter().map(|s| classify(*s, t)).collect::<Vec<_>>()).unwrap();
            prop_assert!(at(lo) >= at(hi));
        }

        #[test]
        fn report_accuracy_matches_rows(sims in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let r = sample_report(&sims);
            let statuses: Vec<Status> = r.rows.iter().map(|x| x.status).collect();
            prop_assert_eq!(r.accuracy_percent, accuracy(&statuses).unwrap());
            for row in &r.rows {
                prop_assert_eq!(row.status == Status::Correct, row.similarity.unwrap() >= r.threshold);
            }
        }
    }
}
