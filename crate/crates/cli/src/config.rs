//! Pipeline configuration file (JSON).
//!
//! Relative paths are resolved against the directory containing the config
//! file. Unknown keys are rejected; parse errors name the offending key path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use enrichcap_core::embed_store::StoreFormat;
use enrichcap_core::providers::ProviderConfig;
use enrichcap_core::text_context::DEFAULT_TEMPLATE;
use enrichcap_core::{FusionConfig, VerifyParams};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// One entry per retrieval model.
    pub encoders: Vec<EncoderConfig>,
    /// JSONL of `{"id", "article_id", "image"?}` linking store ids to articles.
    pub corpus: PathBuf,
    /// JSONL of `{"id", "text"}` articles.
    pub documents: PathBuf,
    pub providers: BTreeMap<String, ProviderSpec>,
    /// Provider used to embed the base caption and article chunks.
    pub text_embedder: String,
    /// Provider used to write the final caption; omitted means no generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_generator: Option<String>,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Hits retrieved per encoder before fusion pools its top entries.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub model_id: String,
    pub store: PathBuf,
    /// Inferred from the file extension when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<StoreFormatName>,
    /// Image embedder for queries that carry no precomputed vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StoreFormatName {
    Jsonl,
    Packed,
}

impl From<StoreFormatName> for StoreFormat {
    fn from(f: StoreFormatName) -> Self {
        match f {
            StoreFormatName::Jsonl => StoreFormat::Jsonl,
            StoreFormatName::Packed => StoreFormat::Packed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderSpec {
    Http(ProviderConfig),
    Mock {
        /// JSON mock fixture; omitted means hashing fallbacks only.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixture: Option<PathBuf>,
        #[serde(default = "default_mock_dim")]
        dimension: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Number of fused candidates compared against the query image.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub params: VerifyParams,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            enabled: true,
            depth: default_depth(),
            params: VerifyParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 2,
            backoff_ms: 250,
        }
    }
}

fn default_template() -> String {
    DEFAULT_TEMPLATE.to_string()
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_top_k() -> usize {
    2
}
fn default_workers() -> usize {
    1
}
fn default_max_words() -> usize {
    350
}
fn default_mock_dim() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_depth() -> usize {
    2
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config {
                path: if path == "." { "(root)".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })
    }

    /// Loads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for e in &mut self.encoders {
            fix(&mut e.store);
        }
        fix(&mut self.corpus);
        fix(&mut self.documents);
        fix(&mut self.output);
        for spec in self.providers.values_mut() {
            if let ProviderSpec::Mock {
                fixture: Some(f), ..
            } = spec
            {
                fix(f);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: String, message: String| Err(CliError::Config { path, message });
        if self.encoders.is_empty() {
            return bad("encoders".into(), "at least one encoder is required".into());
        }
        let mut ids = std::collections::HashSet::new();
        for (i, e) in self.encoders.iter().enumerate() {
            if !ids.insert(e.model_id.as_str()) {
                return bad(format!("encoders[{i}].model_id"), format!("duplicate `{}`", e.model_id));
            }
            if !e.store.is_file() {
                return bad(format!("encoders[{i}].store"), format!("{} not found", e.store.display()));
            }
            if let Some(p) = &e.provider {
                if !self.providers.contains_key(p) {
                    return bad(format!("encoders[{i}].provider"), format!("unknown provider `{p}`"));
                }
            }
        }
        for (key, path) in [("corpus", &self.corpus), ("documents", &self.documents)] {
            if !path.is_file() {
                return bad(key.into(), format!("{} not found", path.display()));
            }
        }
        if !self.providers.contains_key(&self.text_embedder) {
            return bad("text_embedder".into(), format!("unknown provider `{}`", self.text_embedder));
        }
        if let Some(g) = &self.caption_generator {
            if !self.providers.contains_key(g) {
                return bad("caption_generator".into(), format!("unknown provider `{g}`"));
            }
        }
        for (name, spec) in &self.providers {
            match spec {
                ProviderSpec::Http(c) => {
                    if let Err(e) = c.validate() {
                        return bad(format!("providers.{name}"), e.to_string());
                    }
                }
                ProviderSpec::Mock { fixture, dimension } => {
                    if *dimension == 0 {
                        return bad(format!("providers.{name}.dimension"), "must be positive".into());
                    }
                    if let Some(f) = fixture {
                        if !f.is_file() {
                            return bad(format!("providers.{name}.fixture"), format!("{} not found", f.display()));
                        }
                    }
                }
            }
        }
        if let Err(e) = self.fusion.validate() {
            return bad("fusion".into(), e.to_string());
        }
        if self.verify.depth < 2 && self.verify.enabled {
            return bad("verify.depth".into(), "must be at least 2".into());
        }
        if self.top_k == 0 {
            return bad("top_k".into(), "must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers".into(), "must be positive".into());
        }
        if self.template != DEFAULT_TEMPLATE {
            return bad("template".into(), format!("unknown template `{}`", self.template));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_name_the_key_path() {
        let err = PipelineConfig::from_json(
            r#"{"encoders": [{"model_id": "a", "store": "s", "formt": "jsonl"}]}"#,
        )
        .unwrap_err();
        match err {
            CliError::Config { path, message } => {
                assert_eq!(path, "encoders[0].formt");
                assert!(message.contains("unknown field"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let err = PipelineConfig::from_json(r#"{"encoders": [], "seed": "x"}"#).unwrap_err();
        assert!(matches!(err, CliError::Config { ref path, .. } if path == "seed"), "{err:?}");
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = PipelineConfig::from_json(
            r#"{"encoders": [{"model_id": "a", "store": "s.jsonl"}], "corpus": "c", "documents": "d",
                "providers": {"m": {"kind": "mock"}}, "text_embedder": "m"}"#,
        )
        .unwrap();
        assert_eq!(cfg.top_k, 2);
        assert_eq!(cfg.verify.depth, 2);
        assert_eq!(cfg.retry, RetryPolicy { retries: 2, backoff_ms: 250 });
        assert_eq!(cfg.providers["m"], ProviderSpec::Mock { fixture: None, dimension: 64 });
    }
}
