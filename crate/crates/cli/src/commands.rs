//! Single-stage operations behind the subcommands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use enrichcap_core::embed_store::IngestOptions;
use enrichcap_core::keypoints::load_gray;
use enrichcap_core::metrics::{load_captions, load_run, MetricsReport};
use enrichcap_core::text_context::{assemble_prompt, build_context, ContextBundle, Document};
use enrichcap_core::{
    fuse, EmbeddingStore, FusedCandidate, FusionConfig, ModelRanking, StoreFormat, StoreManifest,
    VerifyParams,
};

use crate::config::{PipelineConfig, StoreFormatName};
use crate::error::CliError;
use crate::pipeline::{load_queries, read_jsonl, verify_candidates, Pipeline, VerificationStage};

fn format_or_infer(path: &Path, format: Option<StoreFormatName>) -> StoreFormat {
    format.map_or_else(|| StoreFormat::from_path(path), Into::into)
}

/// Loads (and validates) a store, optionally re-exporting it.
pub fn ingest(
    input: &Path,
    format: Option<StoreFormatName>,
    output: Option<(&Path, Option<StoreFormatName>)>,
    normalize: bool,
) -> Result<StoreManifest, CliError> {
    let store = EmbeddingStore::ingest(input, format_or_infer(input, format), IngestOptions { normalize })?;
    if let Some((path, out_format)) = output {
        store.export(path, format_or_infer(path, out_format))?;
    }
    Ok(store.manifest())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRecord {
    pub query_id: String,
    pub rankings: Vec<ModelRanking>,
}

/// Per-encoder top-k for every query; fails on the first bad query.
pub fn retrieve(config: PipelineConfig, queries: &Path) -> Result<Vec<RetrieveRecord>, CliError> {
    let pipeline = Pipeline::new(config)?;
    load_queries(queries)?
        .iter()
        .map(|q| {
            let bytes = match &q.image {
                Some(p) => Some(std::fs::read(p).map_err(|e| CliError::io(p, e))?),
                None => None,
            };
            let rankings = pipeline.retrieve(q, bytes.as_deref()).map_err(|e| CliError::Stage {
                query_id: q.query_id.clone(),
                stage: e.stage,
                message: e.message,
            })?;
            Ok(RetrieveRecord {
                query_id: q.query_id.clone(),
                rankings,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseRecord {
    pub query_id: String,
    pub fused: Vec<FusedCandidate>,
}

/// Fuses `retrieve` output (JSONL of `{"query_id", "rankings"}`).
pub fn fuse_file(rankings: &Path, config: &FusionConfig) -> Result<Vec<FuseRecord>, CliError> {
    let records: Vec<RetrieveRecord> = read_jsonl(rankings)?;
    records
        .into_iter()
        .map(|r| {
            Ok(FuseRecord {
                fused: fuse(&r.rankings, config)?,
                query_id: r.query_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    #[serde(flatten)]
    pub stage: VerificationStage,
    /// Candidate paths after applying the decision.
    pub ranking: Vec<String>,
}

/// Verifies the query image against candidates given in fused order.
pub fn verify(query: &Path, candidates: &[&Path], params: &VerifyParams) -> Result<VerifyOutput, CliError> {
    if candidates.is_empty() {
        return Err(CliError::Usage("at least one candidate image is required".into()));
    }
    let q = load_gray(query)?;
    let cands = candidates
        .iter()
        .map(|p| Ok((p.display().to_string(), load_gray(p)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let (stage, winner) = verify_candidates(&q, &cands, params);
    let mut ranking: Vec<String> = cands.into_iter().map(|(id, _)| id).collect();
    if let Some(w) = winner {
        let promoted = ranking.remove(w);
        ranking.insert(0, promoted);
    }
    Ok(VerifyOutput { stage, ranking })
}

/// Builds the context bundle for one article of the configured collection.
pub fn context(config: &PipelineConfig, article_id: &str, caption: &str) -> Result<ContextBundle, CliError> {
    let record = enrichcap_core::text_context::load_documents(&config.documents)?
        .into_iter()
        .find(|d| d.id == article_id)
        .ok_or_else(|| CliError::Usage(format!("article `{article_id}` not found")))?;
    let spec = &config.providers[&config.text_embedder];
    let embedder = crate::pipeline::RetryingProvider::from_spec(spec, config.retry)?;
    Ok(build_context(&Document::new(record.id, record.text), caption, &embedder)?)
}

pub fn prompt(bundle: &Path, caption: &str, template: &str) -> Result<String, CliError> {
    let raw = std::fs::read_to_string(bundle).map_err(|e| CliError::io(bundle, e))?;
    let bundle: ContextBundle = serde_json::from_str(&raw).map_err(|e| CliError::Malformed {
        path: bundle.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(assemble_prompt(&bundle, caption, template)?)
}

pub fn eval(run: Option<&Path>, captions: Option<&Path>) -> Result<MetricsReport, CliError> {
    if run.is_none() && captions.is_none() {
        return Err(CliError::Usage("give --run and/or --captions".into()));
    }
    let run = run.map(load_run).transpose()?;
    let captions = captions.map(load_captions).transpose()?;
    Ok(MetricsReport::evaluate(run.as_deref(), captions.as_deref())?)
}
