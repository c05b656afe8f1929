//! Counterfactual item weighting by prediction-error reduction (PER).
//!
//! For a history `e_1..e_L` encoded causally into `h_0..h_L` (`h_n` has seen
//! exactly the first `n` items), item `n` is scored by how much including it
//! lowers the error of predicting the mean of the next `W` items:
//!
//! ```text
//! PER_n = ‖aux(h_{n-1}) − ē_{>n}‖² − ‖aux(h_n) − ē_{>n}‖²
//! w_n   = 1 + tanh(PER_n / T)
//! ```
//!
//! Positions without a future window keep weight 1.

use serde::{Deserialize, Serialize};

use crate::tensor::{squared_distance, Matrix};

/// Maps a hidden state to a predicted future-window embedding.
pub trait AuxPredictor {
    fn predict(&self, hidden: &[f64]) -> Vec<f64>;
}

impl<F> AuxPredictor for F
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    fn predict(&self, hidden: &[f64]) -> Vec<f64> {
        self(hidden)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerRecord {
    /// Zero-based history position of the scored item.
    pub position: usize,
    pub loss_without: f64,
    pub loss_with: f64,
    pub per: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSequence {
    /// `weights[i] · e_i` per position.
    pub embeddings: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub records: Vec<PerRecord>,
}

/// Mean of the `window` items following the first `prefix_len` history items,
/// or `None` when the prefix already covers the whole history.
pub fn future_window_target<R: AsRef<[f64]>>(
    history: &[R],
    prefix_len: usize,
    window: usize,
) -> Option<Vec<f64>> {
    let end = (prefix_len + window).min(history.len());
    if prefix_len >= end {
        return None;
    }
    let d = history[prefix_len].as_ref().len();
    let mut mean = vec![0.0; d];
    for item in &history[prefix_len..end] {
        for (m, &v) in mean.iter_mut().zip(item.as_ref()) {
            *m += v;
        }
    }
    let count = (end - prefix_len) as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Some(mean)
}

/// Returns `(loss_without, loss_with)` for the two predictions.
pub fn per_losses(pred_without: &[f64], pred_with: &[f64], target: &[f64]) -> (f64, f64) {
    (
        squared_distance(pred_without, target),
        squared_distance(pred_with, target),
    )
}

pub fn compute_per<A: AuxPredictor + ?Sized>(
    h_prev: &[f64],
    h_curr: &[f64],
    target: &[f64],
    aux: &A,
) -> f64 {
    let (without, with) = per_losses(&aux.predict(h_prev), &aux.predict(h_curr), target);
    without - with
}

/// Largest double below 2.
const WEIGHT_MAX: f64 = 2.0 - f64::EPSILON;

/// `1 + tanh(per / T)`, evaluated as `2·σ(2·per/T)` so weights near zero keep
/// full relative precision. Saturated values are pinned inside `(0, 2)`.
pub fn per_to_weight(per: f64, temperature: f64) -> f64 {
    debug_assert!(temperature > 0.0);
    let x = 2.0 * per / temperature;
    let w = if x >= 0.0 {
        2.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        2.0 * e / (1.0 + e)
    };
    w.clamp(f64::MIN_POSITIVE, WEIGHT_MAX)
}

/// Positions allowed to receive a counterfactual weight when only the `m`
/// lowest-continuity items are considered. An item's continuity is the
/// smaller of its two adjacent pair values.
pub fn candidate_positions(con: &[f64], m: usize) -> Vec<bool> {
    let len = con.len() + 1;
    let mut scored: Vec<(f64, usize)> = (0..len)
        .map(|i| {
            let left = if i > 0 { con[i - 1] } else { f64::INFINITY };
            let right = if i < con.len() { con[i] } else { f64::INFINITY };
            (left.min(right), i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mask = vec![false; len];
    for &(_, i) in scored.iter().take(m) {
        mask[i] = true;
    }
    mask
}

/// Scores every position with a non-empty future window from precomputed
/// auxiliary predictions `preds[n] = aux(h_n)`, `n = 0..L`.
pub fn per_records_from_predictions<R: AsRef<[f64]>, P: AsRef<[f64]>>(
    history: &[R],
    preds: &[P],
    window: usize,
    temperature: f64,
    candidates: Option<&[bool]>,
) -> Vec<PerRecord> {
    let len = history.len();
    assert!(preds.len() > len.saturating_sub(1), "need aux(h_0)..aux(h_(L-1))");
    let mut records = Vec::new();
    for i in 0..len {
        if candidates.is_some_and(|c| !c[i]) {
            continue;
        }
        // item i is the (i+1)-th item; its window starts right after it
        let Some(target) = future_window_target(history, i + 1, window) else {
            continue;
        };
        let (loss_without, loss_with) =
            per_losses(preds[i].as_ref(), preds[i + 1].as_ref(), &target);
        let per = loss_without - loss_with;
        records.push(PerRecord {
            position: i,
            loss_without,
            loss_with,
            per,
            weight: per_to_weight(per, temperature),
        });
    }
    records
}

pub fn weights_from_records(len: usize, records: &[PerRecord]) -> Vec<f64> {
    let mut weights = vec![1.0; len];
    for r in records {
        weights[r.position] = r.weight;
    }
    weights
}

/// Re-weights a history given its causal hidden states `h_0..h_L`
/// (`hidden.rows() == L + 1`).
pub fn reweight_sequence<R: AsRef<[f64]>, A: AuxPredictor + ?Sized>(
    history: &[R],
    hidden: &Matrix,
    aux: &A,
    window: usize,
    temperature: f64,
    candidates: Option<&[bool]>,
) -> WeightedSequence {
    assert_eq!(hidden.rows(), history.len() + 1, "hidden states must include h_0");
    let preds: Vec<Vec<f64>> = (0..history.len())
        .map(|n| aux.predict(hidden.row(n)))
        .collect();
    let mut padded = preds;
    padded.push(Vec::new()); // aux(h_L) is never needed
    let records = per_records_from_predictions(history, &padded[..], window, temperature, candidates);
    let weights = weights_from_records(history.len(), &records);
    let embeddings = history
        .iter()
        .zip(&weights)
        .map(|(e, &w)| e.as_ref().iter().map(|x| x * w).collect())
        .collect();
    WeightedSequence {
        embeddings,
        weights,
        records,
    }
}

/// Mean over `n = 0..L-1` of `‖aux(h_n) − ē_{>n}‖²`.
pub fn aux_loss<R: AsRef<[f64]>, A: AuxPredictor + ?Sized>(
    history: &[R],
    hidden: &Matrix,
    aux: &A,
    window: usize,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..history.len() {
        if let Some(target) = future_window_target(history, n, window) {
            total += squared_distance(&aux.predict(hidden.row(n)), &target);
            count += 1;
        }
    }
    assert!(count > 0, "aux loss needs at least one future window");
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist() -> Vec<Vec<f64>> {
        vec![
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![4.0, 4.0],
            vec![-2.0, 6.0],
        ]
    }

    #[test]
    fn window_past_the_end_is_none() {
        assert_eq!(future_window_target(&hist(), 4, 3), None);
    }

    #[test]
    fn unit_window_is_next_item() {
        assert_eq!(future_window_target(&hist(), 1, 1), Some(vec![0.0, 2.0]));
    }

    #[test]
    fn window_truncates_at_history_end() {
        // prefix of 2 leaves items 3 and 4; a window of 3 averages just those
        assert_eq!(future_window_target(&hist(), 2, 3), Some(vec![1.0, 5.0]));
        assert_eq!(
            future_window_target(&hist(), 0, 3),
            Some(vec![5.0 / 3.0, 2.0])
        );
    }

    #[test]
    fn identical_predictions_give_zero_per() {
        let aux = |_: &[f64]| vec![0.3, 0.3];
        assert_eq!(compute_per(&[1.0], &[2.0], &[1.0, 1.0], &aux), 0.0);
    }

    #[test]
    fn scalar_per_example() {
        let aux = |h: &[f64]| h.to_vec();
        let per = compute_per(&[0.5], &[0.9], &[1.0], &aux);
        assert!((per - 0.24).abs() < 1e-12);
        let harmful = compute_per(&[1.0], &[0.0], &[1.0], &aux);
        assert_eq!(harmful, -1.0);
    }

    #[test]
    fn weight_values() {
        assert_eq!(per_to_weight(0.0, 1.0), 1.0);
        assert!((per_to_weight(0.24, 1.0) - 1.235_495_749_538_498).abs() < 1e-12);
        assert!(per_to_weight(15.0, 1.0) < 2.0);
        assert!(per_to_weight(-15.0, 1.0) > 0.0);
        assert!(per_to_weight(1e6, 1.0) < 2.0);
        assert!(per_to_weight(-1e6, 1.0) > 0.0);
    }

    #[test]
    fn constant_aux_leaves_sequence_unchanged() {
        let h = hist();
        let hidden = Matrix::from_vec(5, 2, (0..10).map(|x| x as f64).collect());
        let aux = |_: &[f64]| vec![7.0, 7.0];
        let ws = reweight_sequence(&h, &hidden, &aux, 3, 1.0, None);
        assert_eq!(ws.weights, vec![1.0; 4]);
        assert_eq!(ws.embeddings, h);
        assert_eq!(ws.records.len(), 3);
    }

    #[test]
    fn last_position_keeps_unit_weight() {
        let h = hist();
        let hidden = Matrix::from_vec(5, 2, (0..10).map(|x| (x as f64).sin()).collect());
        let aux = |x: &[f64]| vec![x[0] * 3.0, x[1] - 1.0];
        let ws = reweight_sequence(&h, &hidden, &aux, 1, 1.0, None);
        assert_eq!(ws.weights[3], 1.0);
        assert!(ws.records.iter().all(|r| r.position < 3));
        for r in &ws.records {
            assert_eq!(r.per, r.loss_without - r.loss_with);
        }
    }

    #[test]
    fn candidate_filter_restricts_positions() {
        let con = [0.5, 0.1, 0.4];
        let mask = candidate_positions(&con, 2);
        // positions 1 and 2 touch the weakest pair
        assert_eq!(mask, vec![false, true, true, false]);
    }

    #[test]
    fn aux_loss_perfect_and_zero_predictors() {
        let h = vec![vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, 1.0]];
        let hidden = Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let zero = |_: &[f64]| vec![0.0, 0.0];
        assert!((aux_loss(&h, &hidden, &zero, 1) - 1.0).abs() < 1e-12);
        let targets = h.clone();
        let perfect = move |x: &[f64]| targets[x[0] as usize].clone();
        assert_eq!(aux_loss(&h, &hidden, &perfect, 1), 0.0);
    }

    #[test]
    fn aux_loss_tiny_instance_by_hand() {
        // three positions, d = 2, W = 1, aux = identity on the hidden state
        let h = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, -2.0]];
        let hidden = Matrix::from_vec(4, 2, vec![0.5, 0.5, 0.0, 1.0, 2.0, 2.0, 9.0, 9.0]);
        let aux = |x: &[f64]| x.to_vec();
        // n=0: (0.5,0.5) vs (1,2)    -> 0.25 + 2.25 = 2.5
        // n=1: (0,1)     vs (-1,0.5) -> 1 + 0.25    = 1.25
        // n=2: (2,2)     vs (3,-2)   -> 1 + 16      = 17
        let expected = (2.5 + 1.25 + 17.0) / 3.0;
        assert!((aux_loss(&h, &hidden, &aux, 1) - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weight_bounds_and_oddness(p in -15.0f64..15.0, t in 0.5f64..10.0) {
            let w = per_to_weight(p, t);
            prop_assert!(w > 0.0 && w < 2.0);
            prop_assert!((per_to_weight(-p, t) - (2.0 - w)).abs() < 1e-12);
            let tanh_form = 1.0 + (p / t).tanh();
            prop_assert!((w - tanh_form).abs() < 1e-12);
        }

        #[test]
        fn weight_is_monotone(a in -1e3f64..1e3, gap in 0.0f64..5.0, t in 0.5f64..10.0) {
            prop_assert!(per_to_weight(a, t) <= per_to_weight(a + gap, t));
        }

        // strict where doubles can still tell the values apart
        #[test]
        fn weight_is_strictly_monotone_off_saturation(a in -5.0f64..5.0, gap in 1e-3f64..5.0, t in 0.5f64..10.0) {
            prop_assert!(per_to_weight(a, t) < per_to_weight(a + gap, t));
        }

        #[test]
        fn per_is_antisymmetric(
            hp in prop::collection::vec(-2.0f64..2.0, 3),
            hc in prop::collection::vec(-2.0f64..2.0, 3),
            target in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            let aux = |h: &[f64]| h.iter().map(|x| x.tanh() * 1.5).collect::<Vec<_>>();
            let a = compute_per(&hp, &hc, &target, &aux);
            let b = compute_per(&hc, &hp, &target, &aux);
            prop_assert!((a + b).abs() < 1e-12);
        }
    }
}
