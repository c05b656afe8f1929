//! Local continuity, entropy stability score and threshold routing.
//!
//! Continuity is a softmax over the cosine similarities of adjacent history
//! items; the stability score is the (natural-log) entropy of that
//! distribution. A high score means the similarities are flat across the
//! sequence and is treated as low stability.

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    HighStability,
    LowStability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub con: Vec<f64>,
    pub s_k: f64,
    pub verdict: Verdict,
}

/// Cosine similarity; zero-norm inputs yield 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity with a zero-norm embedding; using 0");
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Softmax over adjacent-pair cosine similarities; one entry per pair.
///
/// Requires at least two history items.
pub fn compute_continuity<R: AsRef<[f64]>>(history: &[R]) -> Vec<f64> {
    assert!(history.len() >= 2, "continuity needs at least two items");
    let sims: Vec<f64> = history
        .windows(2)
        .map(|w| cosine(w[0].as_ref(), w[1].as_ref()))
        .collect();
    softmax(&sims)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Entropy `-Σ p ln p` with `0 ln 0 = 0`.
pub fn stability_score(con: &[f64]) -> f64 {
    let h: f64 = con
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // rounding can leave a -0.0 or a hair below zero on degenerate inputs
    h.max(0.0)
}

/// High stability iff `s_k <= lambda_stb`.
pub fn route(s_k: f64, lambda_stb: f64) -> Verdict {
    if s_k <= lambda_stb {
        Verdict::HighStability
    } else {
        Verdict::LowStability
    }
}

pub fn assess<R: AsRef<[f64]>>(history: &[R], lambda_stb: f64) -> StabilityReport {
    let con = compute_continuity(history);
    let s_k = stability_score(&con);
    StabilityReport {
        verdict: route(s_k, lambda_stb),
        con,
        s_k,
    }
}
