use serde::{Deserialize, Serialize};

use super::VerifyError;
use crate::keypoints::{BinaryDescriptor, FloatDescriptor};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub enum Descriptors {
    Binary(Vec<BinaryDescriptor>),
    Float(Vec<FloatDescriptor>),
}

impl Descriptors {
    pub fn len(&self) -> usize {
        match self {
            Descriptors::Binary(d) => d.len(),
            Descriptors::Float(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub query_index: usize,
    pub candidate_index: usize,
    /// Hamming bits for binary descriptors, Euclidean for float.
    pub distance: f64,
    /// Infinite when the candidate set has a single descriptor.
    pub second_distance: f64,
}

pub const DEFAULT_RATIO: f64 = 0.7;

/// Exhaustive two-nearest-neighbour search with the ratio test
/// `distance < tau * second_distance`. Empty inputs yield no matches.
pub fn match_ratio(
    query: &Descriptors,
    candidate: &Descriptors,
    tau: f64,
) -> Result<Vec<MatchPair>, VerifyError> {
    let found = match (query, candidate) {
        (Descriptors::Binary(q), Descriptors::Binary(c)) => {
            nearest_two(q, c, |a, b| a.hamming(b) as f64)
        }
        (Descriptors::Float(q), Descriptors::Float(c)) => nearest_two(q, c, |a, b| a.euclidean(b)),
        _ => return Err(VerifyError::MixedDescriptors),
    };
    Ok(found
        .into_iter()
        .flatten()
        .filter(|m| m.distance < tau * m.second_distance)
        .collect())
}

fn nearest_two<D, F>(query: &[D], candidate: &[D], dist: F) -> Vec<Option<MatchPair>>
where
    D: Sync,
    F: Fn(&D, &D) -> f64 + Sync + Send,
{
    par::map_range(query.len(), |qi| {
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = f64::INFINITY;
        for (ci, c) in candidate.iter().enumerate() {
            let d = dist(&query[qi], c);
            if d < best.0 {
                second = best.0;
                best = (d, ci);
            } else if d < second {
                second = d;
            }
        }
        (best.1 != usize::MAX).then_some(MatchPair {
            query_index: qi,
            candidate_index: best.1,
            distance: best.0,
            second_distance: second,
        })
    })
}
