use serde::{Deserialize, Serialize};

use super::homography::{symmetric_error, Correspondence, Homography};
use super::matching::MatchPair;
use crate::keypoints::Keypoint;

pub const GRID: usize = 4;
pub const CONFIDENCE_THRESHOLD: f64 = 0.4;
/// Rerank needs strictly more challenger inliers than this.
pub const MIN_INLIERS: usize = 8;

const W_INLIER_DIFFERENCE: f64 = 0.4;
const W_INLIER_RATIO: f64 = 0.3;
const W_HOMOGRAPHY: f64 = 0.2;
const W_SPATIAL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VerificationScores {
    pub inlier_ratio: f64,
    pub spatial: f64,
    pub scale: f64,
    pub homography_score: f64,
    pub confidence: f64,
    pub n_inliers: usize,
    pub n_matches: usize,
}

/// Sub-scores for one query/candidate pair; `confidence` is left at zero.
///
/// `spatial` bins inlier query keypoints into a 4x4 grid over the query image:
/// `occupied / 16 * exp(-sigma_grid / n_inliers)` with `sigma_grid` the
/// population standard deviation of all 16 cell counts. `scale` is
/// `1 / (1 + sigma)` over mean-normalized query/candidate size ratios.
/// `homography_score` is `exp(-mean inlier symmetric error / threshold)`.
#[allow(clippy::too_many_arguments)]
pub fn compute_scores(
    matches: &[MatchPair],
    inlier_mask: &[bool],
    homography: Option<&Homography>,
    query_keypoints: &[Keypoint],
    candidate_keypoints: &[Keypoint],
    image_width: usize,
    image_height: usize,
    reproj_threshold: f64,
) -> VerificationScores {
    let n_matches = matches.len();
    let inliers: Vec<&MatchPair> = if inlier_mask.is_empty() {
        Vec::new()
    } else {
        assert_eq!(inlier_mask.len(), n_matches, "mask length must equal match count");
        matches
            .iter()
            .zip(inlier_mask)
            .filter(|(_, &m)| m)
            .map(|(m, _)| m)
            .collect()
    };
    let n_inliers = inliers.len();
    if n_inliers == 0 {
        return VerificationScores {
            n_matches,
            ..VerificationScores::default()
        };
    }

    let query_points: Vec<(f64, f64)> = inliers
        .iter()
        .map(|m| {
            let k = &query_keypoints[m.query_index];
            (k.x as f64, k.y as f64)
        })
        .collect();
    let spatial = spatial_score(&query_points, image_width, image_height);

    let ratios: Vec<f64> = inliers
        .iter()
        .map(|m| {
            query_keypoints[m.query_index].size as f64
                / candidate_keypoints[m.candidate_index].size as f64
        })
        .collect();
    let scale = scale_score(&ratios);

    let homography_score = match homography.and_then(|h| Some((h, h.inverse()?))) {
        Some((h, inv)) => {
            let mean_err = inliers
                .iter()
                .map(|m| {
                    let q = &query_keypoints[m.query_index];
                    let c = &candidate_keypoints[m.candidate_index];
                    symmetric_error(
                        h,
                        &inv,
                        &Correspondence {
                            query: (q.x as f64, q.y as f64),
                            candidate: (c.x as f64, c.y as f64),
                        },
                    )
                })
                .sum::<f64>()
                / n_inliers as f64;
            (-mean_err / reproj_threshold).exp()
        }
        None => 0.0,
    };

    VerificationScores {
        inlier_ratio: n_inliers as f64 / n_matches.max(1) as f64,
        spatial,
        scale,
        homography_score,
        confidence: 0.0,
        n_inliers,
        n_matches,
    }
}

pub(crate) fn cell_of(x: f64, y: f64, width: usize, height: usize) -> usize {
    let cell = |v: f64, extent: usize| {
        let c = (v * GRID as f64 / extent.max(1) as f64).floor();
        c.clamp(0.0, (GRID - 1) as f64) as usize
    };
    cell(y, height) * GRID + cell(x, width)
}

pub fn spatial_score(points: &[(f64, f64)], width: usize, height: usize) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut counts = [0f64; GRID * GRID];
    for &(x, y) in points {
        counts[cell_of(x, y, width, height)] += 1.0;
    }
    let cells = counts.len() as f64;
    let occupied = counts.iter().filter(|&&c| c > 0.0).count() as f64;
    let mean = counts.iter().sum::<f64>() / cells;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / cells;
    occupied / cells * (-var.sqrt() / points.len() as f64).exp()
}

pub fn scale_score(ratios: &[f64]) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    if !(mean > 0.0 && mean.is_finite()) {
        return 0.0;
    }
    let var = ratios.iter().map(|r| (r / mean - 1.0).powi(2)).sum::<f64>() / n;
    1.0 / (1.0 + var.sqrt())
}

/// Pairwise swap test between the incumbent (`a`) and challenger (`b`).
pub fn confidence_and_decision(
    incumbent: &VerificationScores,
    challenger: &VerificationScores,
) -> (f64, bool) {
    let (na, nb) = (incumbent.n_inliers as f64, challenger.n_inliers as f64);
    let inlier_difference = ((nb - na) / na.max(nb).max(1.0)).clamp(0.0, 1.0);
    let confidence = W_INLIER_DIFFERENCE * inlier_difference
        + W_INLIER_RATIO * challenger.inlier_ratio
        + W_HOMOGRAPHY * challenger.homography_score
        + W_SPATIAL * challenger.spatial;
    let rerank = confidence > CONFIDENCE_THRESHOLD && challenger.n_inliers > MIN_INLIERS;
    (confidence, rerank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f32, y: f32, size: f32) -> Keypoint {
        Keypoint {
            x,
            y,
            size,
            angle: 0.0,
            response: 0.0,
            octave: 0,
        }
    }

    fn pairs(n: usize) -> Vec<MatchPair> {
        (0..n)
            .map(|i| MatchPair {
                query_index: i,
                candidate_index: i,
                distance: 0.0,
                second_distance: 1.0,
            })
            .collect()
    }

    #[test]
    fn one_inlier_per_cell_is_fully_spread() {
        let q: Vec<_> = (0..16)
            .map(|i| kp((i % 4) as f32 * 25.0 + 5.0, (i / 4) as f32 * 25.0 + 5.0, 10.0))
            .collect();
        let s = compute_scores(
            &pairs(16),
            &[true; 16],
            Some(&Homography::identity()),
            &q,
            &q,
            100,
            100,
            3.0,
        );
        assert_eq!(s.spatial, 1.0);
        assert_eq!(s.scale, 1.0);
        assert_eq!(s.homography_score, 1.0);
        assert_eq!((s.n_inliers, s.n_matches, s.inlier_ratio), (16, 16, 1.0));
    }

    #[test]
    fn clustered_inliers_are_penalised() {
        let q: Vec<_> = (0..16).map(|i| kp(1.0 + i as f32 * 0.5, 2.0, 4.0)).collect();
        let s = compute_scores(&pairs(16), &[true; 16], None, &q, &q, 100, 100, 3.0);
        // counts (16, 0, ..., 0): sigma = sqrt(15)
        let expected = (1.0 / 16.0) * (-(15f64.sqrt()) / 16.0).exp();
        assert!((s.spatial - expected).abs() < 1e-12);
        assert!((s.spatial - 0.0491).abs() < 1e-4);
        assert_eq!(s.homography_score, 0.0);
    }

    #[test]
    fn uniform_zoom_keeps_scale_consistent() {
        let q: Vec<_> = (0..5).map(|i| kp(i as f32, 0.0, 2.0 + i as f32)).collect();
        let c: Vec<_> = q.iter().map(|k| kp(k.x, k.y, k.size * 2.0)).collect();
        assert_eq!(compute_scores(&pairs(5), &[true; 5], None, &q, &c, 10, 10, 3.0).scale, 1.0);
    }

    #[test]
    fn no_inliers_zeroes_everything() {
        let q = vec![kp(0.0, 0.0, 1.0); 3];
        let s = compute_scores(&pairs(3), &[false; 3], None, &q, &q, 10, 10, 3.0);
        assert_eq!(
            s,
            VerificationScores {
                n_matches: 3,
                ..Default::default()
            }
        );
        let s = compute_scores(&pairs(3), &[], None, &q, &q, 10, 10, 3.0);
        assert_eq!(s.n_inliers, 0);
    }

    #[test]
    fn boundary_coordinates_land_in_last_cell() {
        assert_eq!(cell_of(100.0, 100.0, 100, 100), 15);
        assert_eq!(cell_of(0.0, 0.0, 100, 100), 0);
        assert_eq!(cell_of(99.9, 0.0, 100, 100), 3);
    }

    #[test]
    fn decision_examples() {
        let strong = VerificationScores {
            inlier_ratio: 1.0,
            spatial: 1.0,
            homography_score: 1.0,
            n_inliers: 40,
            n_matches: 40,
            ..Default::default()
        };
        let (c, r) = confidence_and_decision(&VerificationScores::default(), &strong);
        assert!((c - 1.0).abs() < 1e-12);
        assert!(r);

        let zero = VerificationScores::default();
        assert_eq!(confidence_and_decision(&zero, &zero), (0.0, false));

        // inlier_difference 0.5 -> 0.2, plus 0.3 * 0.5 + 0.2 * 0.5 = 0.45
        let a = VerificationScores {
            n_inliers: 4,
            ..Default::default()
        };
        let b = VerificationScores {
            n_inliers: 8,
            inlier_ratio: 0.5,
            homography_score: 0.5,
            n_matches: 16,
            ..Default::default()
        };
        let (c, r) = confidence_and_decision(&a, &b);
        assert!((c - 0.45).abs() < 1e-12);
        assert!(!r, "eight inliers is not enough");
    }
}
