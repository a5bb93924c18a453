use nalgebra::{DMatrix, Matrix3, SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::par;

/// Projective transform mapping query points to candidate points, stored
/// row-major with `h33 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    /// Normalizes by `h33`. Fails for non-finite entries, `h33 ~ 0`, or a
    /// singular upper-left 2x2 block.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let h33 = m[(2, 2)];
        if !h33.is_finite() || h33.abs() < 1e-12 {
            return None;
        }
        let m = m / h33;
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let det2 = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        if det2.abs() < 1e-12 {
            return None;
        }
        Some(Homography(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Option<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        (
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        )
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.0.try_inverse().and_then(Homography::from_matrix)
    }

    /// Largest absolute entry difference.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.0 - other.0).abs().max()
    }
}

impl Serialize for Homography {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Homography::from_rows(rows)
            .ok_or_else(|| serde::de::Error::custom("degenerate homography"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query: (f64, f64),
    pub candidate: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Pixels; applied to the symmetric transfer error.
    pub reproj_threshold: f64,
    pub seed: u64,
    pub min_matches: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 2000,
            reproj_threshold: 3.0,
            seed: 0,
            min_matches: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub homography: Option<Homography>,
    /// Empty when there were too few correspondences to sample.
    pub inlier_mask: Vec<bool>,
}

/// Root mean square of the forward and backward transfer distances.
pub fn symmetric_error(h: &Homography, inv: &Homography, c: &Correspondence) -> f64 {
    let (fx, fy) = h.apply(c.query.0, c.query.1);
    let (bx, by) = inv.apply(c.candidate.0, c.candidate.1);
    let fwd = (fx - c.candidate.0).powi(2) + (fy - c.candidate.1).powi(2);
    let bwd = (bx - c.query.0).powi(2) + (by - c.query.1).powi(2);
    let e = ((fwd + bwd) * 0.5).sqrt();
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Similarity transform taking points to zero mean and mean distance sqrt(2).
fn normalizer(pts: impl Iterator<Item = (f64, f64)> + Clone) -> Option<Matrix3<f64>> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = pts.map(|(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt()).sum::<f64>() / n;
    if mean_dist.is_nan() || mean_dist <= 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    (
        t[(0, 0)] * p.0 + t[(0, 2)],
        t[(1, 1)] * p.1 + t[(1, 2)],
    )
}

fn denormalize(hn: Matrix3<f64>, tq: &Matrix3<f64>, tc: &Matrix3<f64>) -> Option<Homography> {
    let tc_inv = tc.try_inverse()?;
    Homography::from_matrix(tc_inv * hn * tq)
}

/// Normalized direct linear transform, least squares via SVD. Needs >= 4 points.
pub fn dlt(corr: &[Correspondence]) -> Option<Homography> {
    if corr.len() < 4 {
        return None;
    }
    let tq = normalizer(corr.iter().map(|c| c.query))?;
    let tc = normalizer(corr.iter().map(|c| c.candidate))?;
    let rows = (2 * corr.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in corr.iter().enumerate() {
        let (x, y) = transform(&tq, c.query);
        let (u, v) = transform(&tc, c.candidate);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_i, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(min_i);
    let hn = Matrix3::from_fn(|r, c| h[3 * r + c]);
    denormalize(hn, &tq, &tc)
}

/// Exact four-point solve with `h33` fixed to 1 in normalized coordinates.
fn minimal_solve(corr: &[Correspondence; 4]) -> Option<Homography> {
    let tq = normalizer(corr.iter().map(|c| c.query))?;
    let tc = normalizer(corr.iter().map(|c| c.candidate))?;
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, c) in corr.iter().enumerate() {
        let (x, y) = transform(&tq, c.query);
        let (u, v) = transform(&tc, c.candidate);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = x;
        a[(r0, 1)] = y;
        a[(r0, 2)] = 1.0;
        a[(r0, 6)] = -u * x;
        a[(r0, 7)] = -u * y;
        b[r0] = u;
        a[(r1, 3)] = x;
        a[(r1, 4)] = y;
        a[(r1, 5)] = 1.0;
        a[(r1, 6)] = -v * x;
        a[(r1, 7)] = -v * y;
        b[r1] = v;
    }
    let h = a.lu().solve(&b)?;
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    denormalize(hn, &tq, &tc)
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    cross.abs() < 1e-6
}

fn degenerate_sample(s: &[Correspondence; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|t| {
        collinear(s[t[0]].query, s[t[1]].query, s[t[2]].query)
            || collinear(s[t[0]].candidate, s[t[1]].candidate, s[t[2]].candidate)
    })
}

/// Inlier count and summed inlier error.
fn score_model(h: &Homography, corr: &[Correspondence], threshold: f64) -> Option<(usize, f64)> {
    let inv = h.inverse()?;
    let mut count = 0;
    let mut total = 0.0;
    for c in corr {
        let e = symmetric_error(h, &inv, c);
        if e < threshold {
            count += 1;
            total += e;
        }
    }
    Some((count, total))
}

fn mask_for(h: &Homography, corr: &[Correspondence], threshold: f64) -> Vec<bool> {
    match h.inverse() {
        Some(inv) => corr
            .iter()
            .map(|c| symmetric_error(h, &inv, c) < threshold)
            .collect(),
        None => vec![false; corr.len()],
    }
}

pub fn ransac_homography(corr: &[Correspondence], config: &RansacConfig) -> RansacOutcome {
    let min_needed = config.min_matches.max(4);
    if corr.len() < min_needed {
        return RansacOutcome {
            homography: None,
            inlier_mask: Vec::new(),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples: Vec<[usize; 4]> = (0..config.iterations.max(1))
        .map(|_| {
            let idx = rand::seq::index::sample(&mut rng, corr.len(), 4);
            [idx.index(0), idx.index(1), idx.index(2), idx.index(3)]
        })
        .collect();

    let scored = par::map_slice(&samples, |s| {
        let pts = s.map(|i| corr[i]);
        if degenerate_sample(&pts) {
            return None;
        }
        let h = minimal_solve(&pts)?;
        let (count, err) = score_model(&h, corr, config.reproj_threshold)?;
        Some((h, count, err))
    });

    // Most inliers, then lowest summed error, then earliest trial.
    let mut best: Option<(Homography, usize, f64)> = None;
    for (h, count, err) in scored.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some((_, bc, be)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            best = Some((h, count, err));
        }
    }
    let Some((mut h, mut count, mut err)) = best.filter(|b| b.1 >= min_needed) else {
        return RansacOutcome {
            homography: None,
            inlier_mask: vec![false; corr.len()],
        };
    };

    for _ in 0..3 {
        let mask = mask_for(&h, corr, config.reproj_threshold);
        let inliers: Vec<Correspondence> = corr
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
            .collect();
        let Some(refit) = dlt(&inliers) else { break };
        let Some((rc, re)) = score_model(&refit, corr, config.reproj_threshold) else {
            break;
        };
        if rc > count || (rc == count && re < err) {
            h = refit;
            count = rc;
            err = re;
        } else {
            break;
        }
    }
    RansacOutcome {
        homography: Some(h),
        inlier_mask: mask_for(&h, corr, config.reproj_threshold),
    }
}
