//! Nearest-centroid association between two sets of marker positions.

use crate::error::{Error, Result};
use crate::imaging::segment::MarkerObservation;

/// Two candidates closer in distance than this are ambiguous, pixels.
pub const TIE_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(current, reference)` index pairs, sorted by reference index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_reference: Vec<usize>,
    pub unmatched_current: Vec<usize>,
    /// Mean `current − reference` over matched pairs, pixels.
    pub mean_offset: [f64; 2],
}

impl Matching {
    /// Current index matched to each reference index.
    pub fn by_reference(&self, reference_len: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; reference_len];
        for &(c, r) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Greedy globally-nearest matching within `max_dist`.
///
/// Fails with an ambiguity error when a reference point has two candidates
/// inside `max_dist` whose distances differ by less than [`TIE_TOLERANCE`].
pub fn match_centroids(
    current: &[[f64; 2]],
    reference: &[[f64; 2]],
    max_dist: f64,
) -> Result<Matching> {
    if !(max_dist > 0.0) {
        return Err(Error::invalid("max_dist must be positive"));
    }
    let mut candidates = Vec::new();
    let mut ambiguous = Vec::new();
    for (r, &rp) in reference.iter().enumerate() {
        let mut near: Vec<(f64, usize)> = current
            .iter()
            .enumerate()
            .map(|(c, &cp)| (dist(cp, rp), c))
            .filter(|(d, _)| *d <= max_dist)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if near.len() >= 2 && near[1].0 - near[0].0 < TIE_TOLERANCE {
            ambiguous.push(r);
        }
        candidates.extend(near.into_iter().map(|(d, c)| (d, c, r)));
    }
    if !ambiguous.is_empty() {
        return Err(Error::AmbiguousMatch { indices: ambiguous });
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));

    let mut cur_used = vec![false; current.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (_, c, r) in candidates {
        if !cur_used[c] && !ref_used[r] {
            cur_used[c] = true;
            ref_used[r] = true;
            pairs.push((c, r));
        }
    }
    pairs.sort_by_key(|&(_, r)| r);

    let mut mean_offset = [0.0; 2];
    for &(c, r) in &pairs {
        mean_offset[0] += current[c][0] - reference[r][0];
        mean_offset[1] += current[c][1] - reference[r][1];
    }
    if !pairs.is_empty() {
        mean_offset = mean_offset.map(|v| v / pairs.len() as f64);
    }
    Ok(Matching {
        unmatched_reference: (0..reference.len()).filter(|&r| !ref_used[r]).collect(),
        unmatched_current: (0..current.len()).filter(|&c| !cur_used[c]).collect(),
        pairs,
        mean_offset,
    })
}

pub fn match_observations(
    current: &[MarkerObservation],
    reference: &[MarkerObservation],
    max_dist: f64,
) -> Result<Matching> {
    let c: Vec<_> = current.iter().map(|o| o.centroid).collect();
    let r: Vec<_> = reference.iter().map(|o| o.centroid).collect();
    match_centroids(&c, &r, max_dist)
}
