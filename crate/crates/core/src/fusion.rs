//! Consensus fusion of per-encoder rankings.
//!
//! Each model contributes its top `pool_depth` hits. A hit at position `p`
//! from one of `n` models is weighted as `score * (1/n) * position_weights[p]`.
//! A pooled candidate retrieved by `m` distinct models receives the mean of
//! its weighted scores plus `consensus_bonus * (m - 1)`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_store::ScoredHit;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("no rankings to fuse")]
    NoRankings,
    #[error("ranking from model `{0}` has no hits")]
    EmptyRanking(String),
    #[error("ranking from model `{0}` is not sorted by descending score")]
    Unsorted(String),
    #[error("model `{0}` supplied more than one ranking")]
    DuplicateModel(String),
    #[error("position {position} is outside the pool depth {pool_depth}")]
    PositionOutOfRange { position: usize, pool_depth: usize },
    #[error("number of models must be positive")]
    ZeroModels,
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    pub model_id: String,
    pub hits: Vec<ScoredHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub position_weights: Vec<f64>,
    pub consensus_bonus: f64,
    pub pool_depth: usize,
    /// Min-max rescale each model's pooled scores to [0, 1] before weighting.
    pub minmax_normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            position_weights: vec![1.0, 0.8],
            consensus_bonus: 0.03,
            pool_depth: 2,
            minmax_normalize: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.pool_depth == 0 || self.pool_depth > self.position_weights.len() {
            return Err(FusionError::InvalidConfig(format!(
                "pool_depth {} must be in 1..={}",
                self.pool_depth,
                self.position_weights.len()
            )));
        }
        if let Some(w) = self
            .position_weights
            .iter()
            .find(|w| !(**w > 0.0 && **w <= 1.0))
        {
            return Err(FusionError::InvalidConfig(format!(
                "position weight {w} outside (0, 1]"
            )));
        }
        if !self.consensus_bonus.is_finite() {
            return Err(FusionError::InvalidConfig("consensus_bonus must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub model_id: String,
    pub position: usize,
    pub s_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedCandidate {
    pub id: String,
    pub s_final: f64,
    /// Sorted by model id.
    pub contributions: Vec<Contribution>,
}

pub fn weighted_score(
    s_original: f64,
    n_models: usize,
    position: usize,
    config: &FusionConfig,
) -> Result<f64, FusionError> {
    if n_models == 0 {
        return Err(FusionError::ZeroModels);
    }
    if position >= config.pool_depth || position >= config.position_weights.len() {
        return Err(FusionError::PositionOutOfRange {
            position,
            pool_depth: config.pool_depth,
        });
    }
    Ok(s_original * (1.0 / n_models as f64) * config.position_weights[position])
}

pub fn fuse(
    rankings: &[ModelRanking],
    config: &FusionConfig,
) -> Result<Vec<FusedCandidate>, FusionError> {
    config.validate()?;
    if rankings.is_empty() {
        return Err(FusionError::NoRankings);
    }
    let mut seen_models = HashSet::new();
    for r in rankings {
        if r.hits.is_empty() {
            return Err(FusionError::EmptyRanking(r.model_id.clone()));
        }
        if r.hits.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(FusionError::Unsorted(r.model_id.clone()));
        }
        if !seen_models.insert(r.model_id.as_str()) {
            return Err(FusionError::DuplicateModel(r.model_id.clone()));
        }
    }
    let n_models = rankings.len();

    let mut pool: BTreeMap<&str, Vec<Contribution>> = BTreeMap::new();
    for r in rankings {
        let pooled = &r.hits[..r.hits.len().min(config.pool_depth)];
        let (lo, hi) = pooled.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), h| {
            (lo.min(h.score), hi.max(h.score))
        });
        let mut ids_in_model = HashSet::new();
        for (position, hit) in pooled.iter().enumerate() {
            if !ids_in_model.insert(hit.id.as_str()) {
                log::warn!(
                    "model `{}` lists `{}` more than once in its top {}; keeping the higher position",
                    r.model_id,
                    hit.id,
                    config.pool_depth
                );
                continue;
            }
            let score = if config.minmax_normalize {
                if hi > lo {
                    (hit.score - lo) / (hi - lo)
                } else {
                    1.0
                }
            } else {
                hit.score
            };
            pool.entry(hit.id.as_str()).or_default().push(Contribution {
                model_id: r.model_id.clone(),
                position,
                s_weighted: weighted_score(score, n_models, position, config)?,
            });
        }
    }

    let mut fused: Vec<FusedCandidate> = pool
        .into_iter()
        .map(|(id, mut contributions)| {
            contributions.sort_by(|a, b| a.model_id.cmp(&b.model_id));
            FusedCandidate {
                id: id.to_string(),
                s_final: final_score(&contributions, config.consensus_bonus),
                contributions,
            }
        })
        .collect();
    fused.sort_by(|a, b| b.s_final.total_cmp(&a.s_final).then_with(|| a.id.cmp(&b.id)));
    break_near_ties(&mut fused);
    Ok(fused)
}

/// Scores this close are equal up to rounding in the weighting arithmetic.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Reorders runs of scores within [`TIE_TOLERANCE`] of their neighbour by id,
/// so that mathematically equal scores tie-break on id despite rounding.
fn break_near_ties(fused: &mut [FusedCandidate]) {
    let mut start = 0;
    while start < fused.len() {
        let mut end = start + 1;
        while end < fused.len() && fused[end - 1].s_final - fused[end].s_final <= TIE_TOLERANCE {
            end += 1;
        }
        fused[start..end].sort_by(|a, b| a.id.cmp(&b.id));
        start = end;
    }
}

fn final_score(contributions: &[Contribution], bonus: f64) -> f64 {
    let m = contributions.len() as f64;
    let mean = contributions.iter().map(|c| c.s_weighted).sum::<f64>() / m;
    mean + bonus * (m - 1.0)
}
