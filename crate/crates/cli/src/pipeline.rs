//! End-to-end orchestration: retrieve, fuse, verify, build context, render
//! the prompt and optionally generate the caption, per query.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use enrichcap_core::embed_store::IngestOptions;
use enrichcap_core::geom_verify::{confidence_and_decision, ImageFeatures, verify_features};
use enrichcap_core::keypoints::decode_gray;
use enrichcap_core::metrics::{cider_d, CaptionItem, MetricsReport, RunQuery};
use enrichcap_core::providers::{
    CaptionGenerator, GeneratedCaption, HttpProvider, ImageEmbedder, MockProvider, ProviderError,
    TextEmbedder,
};
use enrichcap_core::text_context::{assemble_prompt, build_context, ContextBundle, Document};
use enrichcap_core::{
    fuse, EmbeddingStore, FusedCandidate, GrayImage, ModelRanking, ScoredHit, StoreFormat,
    VerificationReport, VerifyParams,
};

use crate::config::{PipelineConfig, ProviderSpec, RetryPolicy};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    pub article_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Precomputed query vectors keyed by encoder model id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub vectors: BTreeMap<String, Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_caption_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthLine {
    pub query_id: String,
    /// Relevant article ids.
    pub truth: Vec<String>,
    /// Reference captions; CIDEr-D is reported when every line has some.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCheck {
    pub candidate_id: String,
    pub report: VerificationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub candidate_id: String,
    pub confidence: f64,
    pub rerank: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationStage {
    /// In fused order; the first entry is the incumbent.
    pub checks: Vec<CandidateCheck>,
    /// Each challenger against the incumbent.
    pub decisions: Vec<Decision>,
    pub swapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chosen {
    pub candidate_id: String,
    pub article_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutput {
    pub retrieval: BTreeMap<String, Vec<ScoredHit>>,
    pub fused: Vec<FusedCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationStage>,
    /// Candidate ids after verification.
    pub ranking: Vec<String>,
    pub chosen: Chosen,
    pub context: ContextBundle,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<GeneratedCaption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<QueryOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub queries: Vec<QueryRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

impl PipelineResult {
    pub fn failed(&self) -> usize {
        self.queries.iter().filter(|q| q.error.is_some()).count()
    }
}

/// Reads a JSONL file; relative `PathBuf` fields are left for the caller.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let raw = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

/// Queries JSONL with image and caption paths resolved against its directory.
pub fn load_queries(path: &Path) -> Result<Vec<QuerySpec>, CliError> {
    let base = base_dir(path);
    let mut queries: Vec<QuerySpec> = read_jsonl(path)?;
    for q in &mut queries {
        if let Some(p) = &q.image {
            q.image = Some(resolve(&base, p));
        }
        if let Some(p) = &q.base_caption_file {
            q.base_caption_file = Some(resolve(&base, p));
        }
    }
    Ok(queries)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>, CliError> {
    let base = base_dir(path);
    let mut entries: Vec<CorpusEntry> = read_jsonl(path)?;
    for e in &mut entries {
        if let Some(p) = &e.image {
            e.image = Some(resolve(&base, p));
        }
    }
    Ok(entries)
}

enum AnyProvider {
    Http(HttpProvider),
    Mock(MockProvider),
}

/// A configured provider with the pipeline's retry policy applied to
/// transient failures (transport, timeout, 429 and 5xx).
pub struct RetryingProvider {
    inner: AnyProvider,
    policy: RetryPolicy,
}

fn transient(e: &ProviderError) -> bool {
    match e {
        ProviderError::Transport { .. } | ProviderError::Timeout { .. } => true,
        ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl RetryingProvider {
    pub fn from_spec(spec: &ProviderSpec, policy: RetryPolicy) -> Result<Self, CliError> {
        let inner = match spec {
            ProviderSpec::Http(c) => AnyProvider::Http(HttpProvider::new(c.clone())?),
            ProviderSpec::Mock {
                fixture: Some(f), ..
            } => AnyProvider::Mock(MockProvider::from_file(f)?),
            ProviderSpec::Mock {
                fixture: None,
                dimension,
            } => AnyProvider::Mock(MockProvider::with_dimension(*dimension)),
        };
        Ok(RetryingProvider { inner, policy })
    }

    fn attempt<T>(&self, mut call: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut tries = 0;
        loop {
            match call() {
                Err(e) if transient(&e) && tries < self.policy.retries => {
                    let wait = self.policy.backoff_ms.saturating_mul(1 << tries.min(16));
                    log::warn!("provider call failed ({e}); retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                    tries += 1;
                }
                other => return other,
            }
        }
    }
}

impl TextEmbedder for RetryingProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.attempt(|| match &self.inner {
            AnyProvider::Http(p) => p.embed_texts(texts),
            AnyProvider::Mock(p) => p.embed_texts(texts),
        })
    }
}

impl ImageEmbedder for RetryingProvider {
    fn embed_image(&self, image: &[u8], format_hint: &str) -> Result<Vec<f32>, ProviderError> {
        self.attempt(|| match &self.inner {
            AnyProvider::Http(p) => p.embed_image(image, format_hint),
            AnyProvider::Mock(p) => p.embed_image(image, format_hint),
        })
    }
}

impl CaptionGenerator for RetryingProvider {
    fn generate_caption(&self, prompt: &str, max_words: usize) -> Result<GeneratedCaption, ProviderError> {
        self.attempt(|| match &self.inner {
            AnyProvider::Http(p) => p.generate_caption(prompt, max_words),
            AnyProvider::Mock(p) => p.generate_caption(prompt, max_words),
        })
    }
}

struct Encoder {
    model_id: String,
    store: EmbeddingStore,
    provider: Option<Arc<RetryingProvider>>,
}

/// Loaded stores, corpus, documents and providers for one configuration.
pub struct Pipeline {
    config: PipelineConfig,
    encoders: Vec<Encoder>,
    corpus: HashMap<String, CorpusEntry>,
    documents: HashMap<String, Document>,
    text_embedder: Arc<RetryingProvider>,
    captioner: Option<Arc<RetryingProvider>>,
}

fn err(stage: &str, e: impl std::fmt::Display) -> StageError {
    StageError {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

fn format_hint(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("bin")
        .to_ascii_lowercase()
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, CliError> {
        let mut providers: HashMap<String, Arc<RetryingProvider>> = HashMap::new();
        for (name, spec) in &config.providers {
            providers.insert(name.clone(), Arc::new(RetryingProvider::from_spec(spec, config.retry)?));
        }
        let encoders = config
            .encoders
            .iter()
            .map(|e| {
                let format = e.format.map_or_else(|| StoreFormat::from_path(&e.store), Into::into);
                Ok(Encoder {
                    model_id: e.model_id.clone(),
                    store: EmbeddingStore::ingest(&e.store, format, IngestOptions::default())?,
                    provider: e.provider.as_ref().map(|p| providers[p].clone()),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let corpus = load_corpus(&config.corpus)?
            .into_iter()
            .map(|e| (e.id.clone(), e))
            .collect();
        let documents = enrichcap_core::text_context::load_documents(&config.documents)?
            .into_iter()
            .map(|d| (d.id.clone(), Document::new(d.id, d.text)))
            .collect();
        Ok(Pipeline {
            text_embedder: providers[&config.text_embedder].clone(),
            captioner: config.caption_generator.as_ref().map(|g| providers[g].clone()),
            config,
            encoders,
            corpus,
            documents,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn verify_params(&self) -> VerifyParams {
        let mut p = self.config.verify.params.clone();
        p.ransac.seed = self.config.seed;
        p
    }

    pub fn retrieve(
        &self,
        query: &QuerySpec,
        image_bytes: Option<&[u8]>,
    ) -> Result<Vec<ModelRanking>, StageError> {
        let depth = self.config.top_k.max(self.config.fusion.pool_depth);
        self.encoders
            .iter()
            .map(|enc| {
                let vector = match (query.vectors.get(&enc.model_id), &enc.provider, image_bytes) {
                    (Some(v), _, _) => v.clone(),
                    (None, Some(p), Some(bytes)) => {
                        let hint = query.image.as_deref().map(format_hint).unwrap_or_default();
                        p.embed_image(bytes, &hint)
                            .map_err(|e| err("retrieve", format!("{}: {e}", enc.model_id)))?
                    }
                    _ => {
                        return Err(err(
                            "retrieve",
                            format!("no query vector or image embedder for `{}`", enc.model_id),
                        ))
                    }
                };
                let hits = enc
                    .store
                    .topk(&vector, depth)
                    .map_err(|e| err("retrieve", format!("{}: {e}", enc.model_id)))?;
                Ok(ModelRanking {
                    model_id: enc.model_id.clone(),
                    hits,
                })
            })
            .collect()
    }

    fn candidate_image(&self, id: &str) -> Result<Option<GrayImage>, StageError> {
        match self.corpus.get(id).and_then(|e| e.image.as_ref()) {
            Some(p) => enrichcap_core::keypoints::load_gray(p)
                .map(Some)
                .map_err(|e| err("verify", format!("{}: {e}", p.display()))),
            None => Ok(None),
        }
    }

    fn verify(
        &self,
        query_image: &GrayImage,
        ranking: &mut [String],
    ) -> Result<Option<VerificationStage>, StageError> {
        let depth = self.config.verify.depth.min(ranking.len());
        if !self.config.verify.enabled || depth < 2 {
            return Ok(None);
        }
        let mut candidates = Vec::with_capacity(depth);
        for id in &ranking[..depth] {
            match self.candidate_image(id)? {
                Some(img) => candidates.push((id.clone(), img)),
                None => {
                    log::info!("candidate `{id}` has no image; keeping fused order");
                    return Ok(None);
                }
            }
        }
        let (stage, winner) = verify_candidates(query_image, &candidates, &self.verify_params());
        if let Some(w) = winner {
            ranking[..=w].rotate_right(1);
        }
        Ok(Some(stage))
    }

    fn base_caption(&self, query: &QuerySpec) -> Result<String, StageError> {
        if let Some(c) = &query.base_caption {
            return Ok(c.clone());
        }
        if let Some(p) = &query.base_caption_file {
            return std::fs::read_to_string(p)
                .map(|s| s.trim().to_string())
                .map_err(|e| err("context", format!("{}: {e}", p.display())));
        }
        Err(err("context", "no base caption supplied (base_caption or base_caption_file)"))
    }

    pub fn run_query(&self, query: &QuerySpec) -> Result<QueryOutput, StageError> {
        let image_bytes = match &query.image {
            Some(p) => Some(std::fs::read(p).map_err(|e| err("load", format!("{}: {e}", p.display())))?),
            None => None,
        };
        let rankings = self.retrieve(query, image_bytes.as_deref())?;
        let fused = fuse(&rankings, &self.config.fusion).map_err(|e| err("fuse", e))?;
        let mut ranking: Vec<String> = fused.iter().map(|c| c.id.clone()).collect();

        let verification = match &image_bytes {
            Some(bytes) => {
                let img = decode_gray(bytes).map_err(|e| err("verify", e))?;
                self.verify(&img, &mut ranking)?
            }
            None => None,
        };

        let candidate_id = ranking.first().cloned().ok_or_else(|| err("fuse", "empty ranking"))?;
        let article_id = self
            .corpus
            .get(&candidate_id)
            .map(|e| e.article_id.clone())
            .ok_or_else(|| err("context", format!("candidate `{candidate_id}` is not in the corpus")))?;
        let document = self
            .documents
            .get(&article_id)
            .ok_or_else(|| err("context", format!("article `{article_id}` not found")))?;
        let base_caption = self.base_caption(query)?;
        let context = build_context(document, &base_caption, self.text_embedder.as_ref())
            .map_err(|e| err("context", e))?;
        let prompt = assemble_prompt(&context, &base_caption, &self.config.template)
            .map_err(|e| err("prompt", e))?;
        let caption = match &self.captioner {
            Some(g) => Some(
                g.generate_caption(&prompt, self.config.max_words)
                    .map_err(|e| err("caption", e))?,
            ),
            None => None,
        };

        Ok(QueryOutput {
            retrieval: rankings.into_iter().map(|r| (r.model_id, r.hits)).collect(),
            fused,
            verification,
            ranking,
            chosen: Chosen {
                candidate_id,
                article_id,
            },
            context,
            prompt,
            caption,
        })
    }

    pub fn article_of(&self, candidate_id: &str) -> Option<&str> {
        self.corpus.get(candidate_id).map(|e| e.article_id.as_str())
    }

    pub fn run(&self, queries: &[QuerySpec], truth: Option<&[TruthLine]>) -> PipelineResult {
        let run_one = |q: &QuerySpec| {
            let outcome = self.run_query(q);
            if let Err(e) = &outcome {
                log::error!("query `{}` failed at {}: {}", q.query_id, e.stage, e.message);
            }
            let (output, error) = match outcome {
                Ok(o) => (Some(o), None),
                Err(e) => (None, Some(e)),
            };
            QueryRecord {
                query_id: q.query_id.clone(),
                output,
                error,
            }
        };
        let queries = map_queries(queries, self.config.workers, run_one);
        let metrics = truth.map(|t| self.metrics(&queries, t));
        PipelineResult { queries, metrics }
    }

    fn metrics(&self, records: &[QueryRecord], truth: &[TruthLine]) -> MetricsReport {
        let by_id: HashMap<&str, &QueryRecord> =
            records.iter().map(|r| (r.query_id.as_str(), r)).collect();
        let run: Vec<RunQuery> = truth
            .iter()
            .map(|t| {
                let mut seen = HashSet::new();
                let ranked = by_id
                    .get(t.query_id.as_str())
                    .and_then(|r| r.output.as_ref())
                    .map(|o| {
                        o.ranking
                            .iter()
                            .filter_map(|c| self.article_of(c))
                            .filter(|a| seen.insert(*a))
                            .map(str::to_string)
                            .collect()
                    })
                    .unwrap_or_default();
                RunQuery {
                    query_id: t.query_id.clone(),
                    ranked,
                    truth: t.truth.clone(),
                }
            })
            .collect();
        let run_report = MetricsReport::evaluate(Some(&run), None).ok();
        let captions: Option<Vec<CaptionItem>> = truth
            .iter()
            .map(|t| {
                let caption = by_id.get(t.query_id.as_str())?.output.as_ref()?.caption.as_ref()?;
                (!t.references.is_empty()).then(|| CaptionItem {
                    candidate: caption.text.clone(),
                    references: t.references.clone(),
                })
            })
            .collect();
        let cider = captions.filter(|c| !c.is_empty()).and_then(|c| cider_d(&c).ok());
        MetricsReport::new(
            run_report.as_ref().and_then(|r| r.ap),
            run_report.as_ref().and_then(|r| r.recall_at_1),
            run_report.as_ref().and_then(|r| r.recall_at_10),
            cider,
        )
    }
}

/// Compares the query with each candidate (the first is the incumbent) and
/// returns the index of the strongest challenger that clears the decision
/// rule, if any.
pub fn verify_candidates(
    query: &GrayImage,
    candidates: &[(String, GrayImage)],
    params: &VerifyParams,
) -> (VerificationStage, Option<usize>) {
    let qf = ImageFeatures::extract(query, params);
    let checks: Vec<CandidateCheck> = candidates
        .iter()
        .map(|(id, img)| CandidateCheck {
            candidate_id: id.clone(),
            report: verify_features(&qf, &ImageFeatures::extract(img, params), params),
        })
        .collect();
    let decisions: Vec<Decision> = match checks.split_first() {
        Some((incumbent, challengers)) => challengers
            .iter()
            .map(|c| {
                let (confidence, rerank) =
                    confidence_and_decision(&incumbent.report.scores, &c.report.scores);
                Decision {
                    candidate_id: c.candidate_id.clone(),
                    confidence,
                    rerank,
                }
            })
            .collect(),
        None => Vec::new(),
    };
    let winner = decisions
        .iter()
        .enumerate()
        .filter(|(_, d)| d.rerank)
        .max_by(|a, b| a.1.confidence.total_cmp(&b.1.confidence).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i + 1);
    let stage = VerificationStage {
        checks,
        decisions,
        swapped: winner.is_some(),
    };
    (stage, winner)
}

/// Applies `f` to every query on `workers` threads; output keeps input order.
#[cfg(feature = "parallel")]
fn map_queries<F>(queries: &[QuerySpec], workers: usize, f: F) -> Vec<QueryRecord>
where
    F: Fn(&QuerySpec) -> QueryRecord + Sync + Send,
{
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| queries.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not start {workers} workers ({e}); running sequentially");
            queries.iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn map_queries<F>(queries: &[QuerySpec], _workers: usize, f: F) -> Vec<QueryRecord>
where
    F: Fn(&QuerySpec) -> QueryRecord,
{
    queries.iter().map(f).collect()
}

/// Loads everything and runs all queries.
pub fn run_pipeline(
    config: &PipelineConfig,
    queries: &[QuerySpec],
    truth: Option<&[TruthLine]>,
) -> Result<PipelineResult, CliError> {
    Ok(Pipeline::new(config.clone())?.run(queries, truth))
}
