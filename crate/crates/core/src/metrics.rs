//! Retrieval metrics (average precision, recall@k) and the CIDEr-D caption
//! consensus score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("run has no queries")]
    EmptyRun,
    #[error("query `{0}` has no ground truth")]
    EmptyTruth(String),
    #[error("query `{query_id}` ranks `{id}` more than once")]
    DuplicateRanked { query_id: String, id: String },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("caption set is empty")]
    EmptyCaptionSet,
    #[error("caption item {0} has no references")]
    NoReferences(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunQuery {
    pub query_id: String,
    pub ranked: Vec<String>,
    pub truth: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionItem {
    pub candidate: String,
    pub references: Vec<String>,
}

fn validate_run(run: &[RunQuery]) -> Result<(), MetricsError> {
    if run.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    for q in run {
        if q.truth.is_empty() {
            return Err(MetricsError::EmptyTruth(q.query_id.clone()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = q.ranked.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(MetricsError::DuplicateRanked {
                query_id: q.query_id.clone(),
                id: dup.clone(),
            });
        }
    }
    Ok(())
}

fn query_ap(q: &RunQuery) -> f64 {
    let truth: HashSet<&str> = q.truth.iter().map(String::as_str).collect();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, id) in q.ranked.iter().enumerate() {
        if truth.contains(id.as_str()) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / truth.len() as f64
}

/// Mean over queries of the summed precision at each relevant rank divided
/// by the number of relevant items.
pub fn average_precision(run: &[RunQuery]) -> Result<f64, MetricsError> {
    validate_run(run)?;
    Ok(run.iter().map(query_ap).sum::<f64>() / run.len() as f64)
}

/// Fraction of queries with at least one relevant id in the top `k`.
pub fn recall_at_k(run: &[RunQuery], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    validate_run(run)?;
    let hits = run
        .iter()
        .filter(|q| q.ranked.iter().take(k).any(|id| q.truth.contains(id)))
        .count();
    Ok(hits as f64 / run.len() as f64)
}

/// Lowercase, split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

type Counts = HashMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String]) -> [Counts; CIDER_MAX_N] {
    std::array::from_fn(|i| {
        let mut m = Counts::new();
        for w in tokens.windows(i + 1) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
        m
    })
}

struct TfIdf {
    vecs: [Counts; CIDER_MAX_N],
    norms: [f64; CIDER_MAX_N],
    len: f64,
}

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> TfIdf {
    let counts = ngram_counts(tokens);
    let mut norms = [0.0; CIDER_MAX_N];
    let vecs = std::array::from_fn(|i| {
        let mut v = Counts::new();
        for (g, tf) in &counts[i] {
            // N-grams absent from every reference carry no weight.
            let w = match df.get(g) {
                Some(&d) => tf * (log_n - (d as f64).ln()),
                None => 0.0,
            };
            norms[i] += w * w;
            v.insert(g.clone(), w);
        }
        v
    });
    TfIdf {
        vecs,
        norms: norms.map(f64::sqrt),
        len: tokens.len() as f64,
    }
}

fn similarity(hyp: &TfIdf, reference: &TfIdf) -> f64 {
    let delta = hyp.len - reference.len;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        let mut val = 0.0;
        for (g, &h) in &hyp.vecs[n] {
            if let Some(&r) = reference.vecs[n].get(g) {
                val += h.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        total += val * penalty;
    }
    total / CIDER_MAX_N as f64
}

/// Per-item CIDEr-D scores (each in `[0, 10]`). Document frequency counts the
/// items whose references contain an n-gram; IDF is `ln(items / df)`.
pub fn cider_d_items(items: &[CaptionItem]) -> Result<Vec<f64>, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptyCaptionSet);
    }
    if let Some(i) = items.iter().position(|it| it.references.is_empty()) {
        return Err(MetricsError::NoReferences(i));
    }
    let ref_tokens: Vec<Vec<Vec<String>>> = items
        .iter()
        .map(|it| it.references.iter().map(|r| tokenize(r)).collect())
        .collect();
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for refs in &ref_tokens {
        let mut grams: HashSet<&[String]> = HashSet::new();
        for toks in refs {
            for n in 1..=CIDER_MAX_N {
                grams.extend(toks.windows(n));
            }
        }
        for g in grams {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_n = (items.len() as f64).ln();
    let indices: Vec<usize> = (0..items.len()).collect();
    Ok(par::map_slice(&indices, |&i| {
        let hyp_tokens = tokenize(&items[i].candidate);
        if hyp_tokens.is_empty() {
            return 0.0;
        }
        let hyp = tfidf(&hyp_tokens, &df, log_n);
        let refs = &ref_tokens[i];
        let sum: f64 = refs
            .iter()
            .map(|r| similarity(&hyp, &tfidf(r, &df, log_n)))
            .sum();
        CIDER_SCALE * sum / refs.len() as f64
    }))
}

pub fn cider_d(items: &[CaptionItem]) -> Result<f64, MetricsError> {
    let scores = cider_d_items(items)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `overall` is the unweighted mean and is present only when every component is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_at_10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cider_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<f64>,
}

impl MetricsReport {
    pub fn new(
        ap: Option<f64>,
        recall_at_1: Option<f64>,
        recall_at_10: Option<f64>,
        cider_d: Option<f64>,
    ) -> Self {
        let parts = [ap, recall_at_1, recall_at_10, cider_d];
        let overall = parts
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        MetricsReport {
            ap,
            recall_at_1,
            recall_at_10,
            cider_d,
            overall,
        }
    }

    pub fn evaluate(
        run: Option<&[RunQuery]>,
        captions: Option<&[CaptionItem]>,
    ) -> Result<Self, MetricsError> {
        let (ap, r1, r10) = match run {
            Some(r) => (
                Some(average_precision(r)?),
                Some(recall_at_k(r, 1)?),
                Some(recall_at_k(r, 10)?),
            ),
            None => (None, None, None),
        };
        let cider = captions.map(cider_d).transpose()?;
        Ok(Self::new(ap, r1, r10, cider))
    }
}

fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, MetricsError> {
    let p = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: p.clone(),
        source,
    })?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::MalformedLine {
                path: p.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_run(path: &Path) -> Result<Vec<RunQuery>, MetricsError> {
    load_jsonl(path)
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionItem>, MetricsError> {
    load_jsonl(path)
}

/// Ground truth as `query_id -> relevant ids`, from JSONL lines
/// `{"query_id": ..., "truth": [...]}`.
pub fn load_truth(path: &Path) -> Result<BTreeMap<String, Vec<String>>, MetricsError> {
    #[derive(Deserialize)]
    struct Line {
        query_id: String,
        truth: Vec<String>,
    }
    Ok(load_jsonl::<Line>(path)?
        .into_iter()
        .map(|l| (l.query_id, l.truth))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str, ranked: &[&str], truth: &[&str]) -> RunQuery {
        RunQuery {
            query_id: id.into(),
            ranked: ranked.iter().map(|s| s.to_string()).collect(),
            truth: truth.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[q("a", &["x", "y"], &["x"])]).unwrap(), 1.0);
        assert_eq!(average_precision(&[q("a", &["y", "x"], &["x"])]).unwrap(), 0.5);
        let run = [q("a", &["x"], &["x"]), q("b", &["y", "x"], &["x"])];
        assert_eq!(average_precision(&run).unwrap(), 0.75);
        // unretrieved relevant item contributes zero
        assert_eq!(average_precision(&[q("a", &["x"], &["x", "z"])]).unwrap(), 0.5);
    }

    #[test]
    fn recall_examples() {
        let at = |rank: usize| {
            let mut ranked: Vec<String> = (0..rank).map(|i| format!("d{i}")).collect();
            ranked[rank - 1] = "gold".into();
            RunQuery {
                query_id: format!("q{rank}"),
                ranked,
                truth: vec!["gold".into()],
            }
        };
        assert_eq!(recall_at_k(&[at(1)], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[at(11)], 10).unwrap(), 0.0);
        let r = recall_at_k(&[at(1), at(5), at(12)], 10).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn run_errors() {
        assert!(matches!(average_precision(&[]), Err(MetricsError::EmptyRun)));
        assert!(matches!(
            recall_at_k(&[q("a", &["x"], &[])], 1),
            Err(MetricsError::EmptyTruth(_))
        ));
        assert!(matches!(
            recall_at_k(&[q("a", &["x", "x"], &["x"])], 1),
            Err(MetricsError::DuplicateRanked { .. })
        ));
        assert!(matches!(recall_at_k(&[q("a", &["x"], &["x"])], 0), Err(MetricsError::ZeroK)));
    }

    fn item(c: &str, refs: &[&str]) -> CaptionItem {
        CaptionItem {
            candidate: c.into(),
            references: refs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn cider_identity_and_disjoint() {
        let items = [
            item("a man rides a red bicycle down the street", &["a man rides a red bicycle down the street"]),
            item("two dogs play in the snow", &["two dogs play together in deep snow"]),
            item("xyzzy plugh", &["the crowd cheers at the stadium tonight"]),
        ];
        let s = cider_d_items(&items).unwrap();
        assert!((s[0] - 10.0).abs() < 1e-6, "{}", s[0]);
        assert_eq!(s[2], 0.0);
        assert!(s[1] > 0.0 && s[1] < 10.0);
    }

    #[test]
    fn cider_empty_candidate_scores_zero() {
        let items = [item("", &["a b c d"]), item("e f g h", &["e f g h"])];
        assert_eq!(cider_d_items(&items).unwrap()[0], 0.0);
        assert!(matches!(cider_d(&[]), Err(MetricsError::EmptyCaptionSet)));
        assert!(matches!(cider_d(&[item("a", &[])]), Err(MetricsError::NoReferences(0))));
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Hello, World! It's 2024."), ["hello", "world", "it", "s", "2024"]);
    }

    #[test]
    fn overall_only_when_complete() {
        let r = MetricsReport::new(Some(1.0), Some(1.0), Some(1.0), None);
        assert_eq!(r.overall, None);
        let r = MetricsReport::new(Some(1.0), Some(0.5), Some(1.0), Some(0.5));
        assert_eq!(r.overall, Some(0.75));
        let json = serde_json::to_string(&MetricsReport::new(Some(1.0), None, None, None)).unwrap();
        assert_eq!(json, r#"{"ap":1.0}"#);
    }
}
