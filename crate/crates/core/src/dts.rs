//! Dual-side Thompson sampling redundancy removal for high-stability
//! sequences.
//!
//! Each interior history item has two adjacent continuity values, one per
//! side. Each side is treated as Beta-Bernoulli evidence that the item is
//! redundant with its neighbour: a posterior draw
//! `θ ~ Beta(α0 + c·κ, β0 + (1 − c)·κ)` is taken per side and the item
//! becomes a removal candidate only when both draws exceed one half.
//! Candidates are removed highest-evidence first until the removal budget
//! is spent. The first and last items are never removed.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtsParams {
    pub alpha0: f64,
    pub beta0: f64,
    pub max_removal_frac: f64,
    pub min_history: usize,
    /// Pseudo-count scale `κ` turning a continuity value into Beta evidence.
    pub pseudo_counts: f64,
}

impl Default for DtsParams {
    fn default() -> Self {
        DtsParams {
            alpha0: 1.0,
            beta0: 1.0,
            max_removal_frac: 0.3,
            min_history: 2,
            pseudo_counts: 10.0,
        }
    }
}

impl DtsParams {
    /// Largest number of items that may be dropped from a history of `len`.
    pub fn removal_budget(&self, len: usize) -> usize {
        let keep_frac = ((1.0 - self.max_removal_frac) * len as f64).ceil() as usize;
        len.saturating_sub(self.min_history.max(keep_frac))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtsOutcome {
    /// Surviving positions in their original order.
    pub kept: Vec<usize>,
    /// `true` where the item was dropped.
    pub removed: Vec<bool>,
}

impl DtsOutcome {
    pub fn identity(len: usize) -> Self {
        DtsOutcome {
            kept: (0..len).collect(),
            removed: vec![false; len],
        }
    }

    pub fn num_removed(&self) -> usize {
        self.removed.iter().filter(|&&r| r).count()
    }
}

fn posterior_draw<R: Rng + ?Sized>(evidence: f64, p: &DtsParams, rng: &mut R) -> f64 {
    let a = p.alpha0 + evidence * p.pseudo_counts;
    let b = p.beta0 + (1.0 - evidence) * p.pseudo_counts;
    Beta::new(a, b)
        .expect("Beta parameters are positive")
        .sample(rng)
}

/// Simplifies a history of `con.len() + 1` items given its continuity
/// distribution. No random draws are made when the budget is zero.
pub fn dts_simplify<R: Rng + ?Sized>(con: &[f64], params: &DtsParams, rng: &mut R) -> DtsOutcome {
    let len = con.len() + 1;
    let budget = params.removal_budget(len);
    if budget == 0 || len < 3 {
        return DtsOutcome::identity(len);
    }

    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for i in 1..len - 1 {
        let (left, right) = (con[i - 1], con[i]);
        let theta_left = posterior_draw(left, params, rng);
        let theta_right = posterior_draw(right, params, rng);
        if theta_left.min(theta_right) > 0.5 {
            candidates.push((left.min(right), i));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut removed = vec![false; len];
    for &(_, i) in candidates.iter().take(budget) {
        removed[i] = true;
    }
    DtsOutcome {
        kept: (0..len).filter(|&i| !removed[i]).collect(),
        removed,
    }
}
