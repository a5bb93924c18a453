//! Geometric verification of a query/candidate image pair.
//!
//! Descriptors are matched with the nearest-neighbour ratio test, a
//! homography is fitted with seeded RANSAC, and the surviving inliers are
//! scored for coverage, scale consistency and fit tightness. The composite
//! confidence decides whether a challenger should swap places with the
//! incumbent in a fused ranking.

mod homography;
mod matching;
mod scores;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use homography::{
    dlt, ransac_homography, symmetric_error, Correspondence, Homography, RansacConfig,
    RansacOutcome,
};
pub use matching::{match_ratio, Descriptors, MatchPair, DEFAULT_RATIO};
pub use scores::{
    compute_scores, confidence_and_decision, scale_score, spatial_score, VerificationScores,
    CONFIDENCE_THRESHOLD, GRID, MIN_INLIERS,
};

use crate::keypoints::{
    detect_describe_binary, detect_describe_float, BinaryParams, FloatParams, GrayImage, Keypoint,
};
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("cannot match binary descriptors against float descriptors")]
    MixedDescriptors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyParams {
    pub binary: BinaryParams,
    pub float: FloatParams,
    pub ratio: f64,
    pub ransac: RansacConfig,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams {
            binary: BinaryParams::default(),
            float: FloatParams::default(),
            ratio: DEFAULT_RATIO,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Binary,
    Float,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub pipeline: Pipeline,
    pub scores: VerificationScores,
    pub homography: Option<Homography>,
    pub inlier_mask: Vec<bool>,
    pub rerank: bool,
}

impl VerificationReport {
    pub fn unverifiable() -> Self {
        VerificationReport {
            pipeline: Pipeline::Binary,
            scores: VerificationScores::default(),
            homography: None,
            inlier_mask: Vec::new(),
            rerank: false,
        }
    }
}

/// Keypoints and descriptors from both pipelines for one image.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub width: usize,
    pub height: usize,
    pub binary_keypoints: Vec<Keypoint>,
    pub binary: Descriptors,
    pub float_keypoints: Vec<Keypoint>,
    pub float: Descriptors,
}

impl ImageFeatures {
    pub fn extract(image: &GrayImage, params: &VerifyParams) -> Self {
        let (bin, flt) = par::join(
            || detect_describe_binary(image, &params.binary),
            || detect_describe_float(image, &params.float),
        );
        let (binary_keypoints, bin_desc) = bin.into_iter().map(|f| (f.keypoint, f.descriptor)).unzip();
        let (float_keypoints, flt_desc) = flt.into_iter().map(|f| (f.keypoint, f.descriptor)).unzip();
        ImageFeatures {
            width: image.width(),
            height: image.height(),
            binary_keypoints,
            binary: Descriptors::Binary(bin_desc),
            float_keypoints,
            float: Descriptors::Float(flt_desc),
        }
    }
}

fn run_pipeline(
    pipeline: Pipeline,
    query: &ImageFeatures,
    candidate: &ImageFeatures,
    params: &VerifyParams,
) -> VerificationReport {
    let (qk, qd, ck, cd) = match pipeline {
        Pipeline::Binary => (
            &query.binary_keypoints,
            &query.binary,
            &candidate.binary_keypoints,
            &candidate.binary,
        ),
        Pipeline::Float => (
            &query.float_keypoints,
            &query.float,
            &candidate.float_keypoints,
            &candidate.float,
        ),
    };
    let matches = match_ratio(qd, cd, params.ratio).expect("descriptor kinds agree per pipeline");
    let corr: Vec<Correspondence> = matches
        .iter()
        .map(|m| {
            let (q, c) = (&qk[m.query_index], &ck[m.candidate_index]);
            Correspondence {
                query: (q.x as f64, q.y as f64),
                candidate: (c.x as f64, c.y as f64),
            }
        })
        .collect();
    let outcome = ransac_homography(&corr, &params.ransac);
    let scores = compute_scores(
        &matches,
        &outcome.inlier_mask,
        outcome.homography.as_ref(),
        qk,
        ck,
        query.width,
        query.height,
        params.ransac.reproj_threshold,
    );
    VerificationReport {
        pipeline,
        scores,
        homography: outcome.homography,
        inlier_mask: outcome.inlier_mask,
        rerank: false,
    }
}

/// Runs both pipelines and keeps the one with more inliers (binary on ties).
/// Confidence is computed against an incumbent with no inliers.
pub fn verify_features(
    query: &ImageFeatures,
    candidate: &ImageFeatures,
    params: &VerifyParams,
) -> VerificationReport {
    let (bin, flt) = par::join(
        || run_pipeline(Pipeline::Binary, query, candidate, params),
        || run_pipeline(Pipeline::Float, query, candidate, params),
    );
    let mut report = if flt.scores.n_inliers > bin.scores.n_inliers {
        flt
    } else {
        bin
    };
    let (confidence, rerank) =
        confidence_and_decision(&VerificationScores::default(), &report.scores);
    report.scores.confidence = confidence;
    report.rerank = rerank;
    report
}

pub fn verify_pair(
    query: &GrayImage,
    candidate: &GrayImage,
    params: &VerifyParams,
) -> VerificationReport {
    let (q, c) = par::join(
        || ImageFeatures::extract(query, params),
        || ImageFeatures::extract(candidate, params),
    );
    verify_features(&q, &c, params)
}
