//! Leave-one-out ranking metrics against sampled negatives.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Scoring;
use crate::data::{InteractionSequence, Sample};
use crate::error::{CardError, Result};
use crate::model::{CardModel, Variant};
use crate::rng::seeded_rng;
use crate::stability::cosine;
use crate::tensor::{dot, Matrix};

/// Users generated per sampling batch.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user_id: String,
    /// One-based rank of the ground truth among all candidates.
    pub rank: usize,
    pub hit: u8,
    pub ndcg: f64,
}

impl RankingResult {
    pub fn from_rank(user_id: impl Into<String>, rank: usize, k: usize) -> Self {
        let hit = rank <= k;
        RankingResult {
            user_id: user_id.into(),
            rank,
            hit: hit as u8,
            ndcg: if hit { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 },
        }
    }
}

pub fn score_candidates(generated: &[f64], candidates: &[usize], items: &Matrix, scoring: Scoring) -> Vec<f64> {
    candidates
        .iter()
        .map(|&c| match scoring {
            Scoring::InnerProduct => dot(generated, items.row(c)),
            Scoring::Cosine => cosine(generated, items.row(c)),
        })
        .collect()
}

/// Rank of a target scoring `target` among `others`; equal scores rank ahead
/// of the target.
pub fn pessimistic_rank(target: f64, others: &[f64]) -> usize {
    1 + others.iter().filter(|&&s| s >= target).count()
}

/// `count` distinct items from `0..n_items` outside `exclude`, uniformly.
pub fn sample_negatives<R: Rng + ?Sized>(
    n_items: usize,
    exclude: &HashSet<usize>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..n_items).filter(|i| !exclude.contains(i)).collect();
    if pool.len() < count {
        return Err(CardError::UniverseTooSmall {
            available: pool.len(),
            requested: count,
        });
    }
    Ok(rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub neg_samples: usize,
    pub k: usize,
    pub scoring: Scoring,
    /// Rank against every unseen item instead of sampled negatives.
    pub full_ranking: bool,
}

impl EvalSettings {
    pub fn from_config(c: &crate::config::ModelConfig) -> Self {
        EvalSettings {
            neg_samples: c.neg_samples,
            k: c.top_k,
            scoring: c.scoring,
            full_ranking: c.full_ranking,
        }
    }
}

/// Ranks `target` for one user given the generated embedding. Negatives never
/// include any item of the user's full sequence.
pub fn evaluate_user<R: Rng + ?Sized>(
    user_id: &str,
    generated: &[f64],
    target: usize,
    sequence: &[usize],
    items: &Matrix,
    settings: &EvalSettings,
    rng: &mut R,
) -> Result<RankingResult> {
    let seen: HashSet<usize> = sequence.iter().copied().chain(std::iter::once(target)).collect();
    let negatives = if settings.full_ranking {
        (0..items.rows()).filter(|i| !seen.contains(i)).collect()
    } else {
        sample_negatives(items.rows(), &seen, settings.neg_samples, rng)?
    };
    let target_score = score_candidates(generated, &[target], items, settings.scoring)[0];
    let scores = score_candidates(generated, &negatives, items, settings.scoring);
    Ok(RankingResult::from_rank(
        user_id,
        pessimistic_rank(target_score, &scores),
        settings.k,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub results: Vec<RankingResult>,
    /// User-mean hit rate in `[0, 1]`.
    pub hr: f64,
    pub ndcg: f64,
    pub seconds: f64,
    pub seconds_per_batch: f64,
}

pub fn mean_metrics(results: &[RankingResult]) -> (f64, f64) {
    if results.is_empty() {
        return (0.0, 0.0);
    }
    let n = results.len() as f64;
    (
        results.iter().map(|r| r.hit as f64).sum::<f64>() / n,
        results.iter().map(|r| r.ndcg).sum::<f64>() / n,
    )
}

/// Generates an embedding for every sample and ranks its target. Negatives
/// and sampling noise come from streams of `seed`, so two models evaluated
/// with one seed face identical candidates.
pub fn evaluate_model(
    model: &CardModel,
    samples: &[Sample],
    sequences: &[InteractionSequence],
    variant: Variant,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalRun> {
    let start = Instant::now();
    let mut neg_rng = seeded_rng(seed, "eval-negatives");
    let mut gen_rng = seeded_rng(seed, "eval-sampling");
    let items = model.item_matrix();
    let mut results = Vec::with_capacity(samples.len());
    let mut batches = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        batches += 1;
        let histories: Vec<&[usize]> = chunk.iter().map(|s| s.history.as_slice()).collect();
        let guidance = model.guidance_matrix(&histories, variant);
        let generated = model.generate(&guidance, &mut gen_rng);
        for (row, s) in chunk.iter().enumerate() {
            let seq = &sequences[s.user];
            results.push(evaluate_user(
                &seq.user_id,
                generated.row(row),
                s.target,
                &seq.items,
                &items,
                settings,
                &mut neg_rng,
            )?);
        }
    }
    let (hr, ndcg) = mean_metrics(&results);
    let seconds = start.elapsed().as_secs_f64();
    Ok(EvalRun {
        results,
        hr,
        ndcg,
        seconds,
        seconds_per_batch: seconds / batches.max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Percentages.
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricSummary {
    /// Mean and sample standard deviation; a single value has std 0.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        assert!(n > 0, "at least one run");
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MetricSummary {
            mean,
            std,
            per_seed: values.to_vec(),
        }
    }

    pub fn display(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

/// `metric name → summary`, e.g. `"HR@20"`.
pub type MetricsReport = BTreeMap<String, MetricSummary>;

/// Aggregates per-seed user-mean metrics (fractions) into percentages.
pub fn aggregate(runs: &[(f64, f64)], k: usize) -> MetricsReport {
    let hr: Vec<f64> = runs.iter().map(|r| 100.0 * r.0).collect();
    let ndcg: Vec<f64> = runs.iter().map(|r| 100.0 * r.1).collect();
    let mut report = MetricsReport::new();
    report.insert(format!("HR@{k}"), MetricSummary::from_values(&hr));
    report.insert(format!("NDCG@{k}"), MetricSummary::from_values(&ndcg));
    report
}

pub const CSV_HEADER: &str = "label,seed,hr,ndcg";

/// One CSV line per run, percentages with two decimals.
pub fn csv_rows(label: &str, seeds: &[u64], runs: &[(f64, f64)]) -> String {
    let mut out = String::new();
    for (seed, (hr, ndcg)) in seeds.iter().zip(runs) {
        let _ = writeln!(out, "{label},{seed},{:.2},{:.2}", 100.0 * hr, 100.0 * ndcg);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_one_and_boundary() {
        let r = RankingResult::from_rank("u", 1, 20);
        assert_eq!((r.hit, r.ndcg), (1, 1.0));
        let r = RankingResult::from_rank("u", 21, 20);
        assert_eq!((r.hit, r.ndcg), (0, 0.0));
        let r = RankingResult::from_rank("u", 20, 20);
        assert_eq!(r.hit, 1);
    }

    #[test]
    fn ndcg_at_rank_four() {
        let r = RankingResult::from_rank("u", 4, 20);
        assert!((r.ndcg - 1.0 / 5f64.log2()).abs() < 1e-15);
        assert!((r.ndcg - 0.4307).abs() < 1e-4);
    }

    #[test]
    fn matching_candidate_scores_highest() {
        let items = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![0.0, 0.0, 0.9]]);
        let s = score_candidates(&[1.0, 0.0, 0.0], &[0, 1, 2], &items, Scoring::InnerProduct);
        assert_eq!(pessimistic_rank(s[0], &s[1..]), 1);
    }

    #[test]
    fn zero_vector_ties_everything_pessimistically() {
        let items = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let s = score_candidates(&[0.0, 0.0], &[0, 1, 2], &items, Scoring::InnerProduct);
        assert_eq!(s, vec![0.0; 3]);
        assert_eq!(pessimistic_rank(s[0], &s[1..]), 3);
    }

    #[test]
    fn hand_computed_dot_products() {
        let items = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-3.0, 1.5]]);
        let s = score_candidates(&[2.0, -4.0], &[0, 1, 2], &items, Scoring::InnerProduct);
        assert_eq!(s, vec![5.0, 3.0, -12.0]);
        let c = score_candidates(&[2.0, 0.0], &[1], &items, Scoring::Cosine);
        assert!((c[0] - 2.0 / (4.0f64 + 0.0625).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn universe_too_small_is_an_error() {
        let exclude: HashSet<usize> = [0, 1, 2].into();
        let err = sample_negatives(10, &exclude, 8, &mut crate::rng::seeded_rng(1, "neg")).unwrap_err();
        assert!(matches!(err, CardError::UniverseTooSmall { available: 7, requested: 8 }));
    }

    #[test]
    fn negatives_avoid_the_sequence() {
        let exclude: HashSet<usize> = (0..50).step_by(2).collect();
        let negs = sample_negatives(60, &exclude, 30, &mut crate::rng::seeded_rng(1, "neg")).unwrap();
        let distinct: HashSet<_> = negs.iter().collect();
        assert_eq!(distinct.len(), 30);
        assert!(negs.iter().all(|n| !exclude.contains(n)));
    }

    #[test]
    fn aggregate_examples() {
        let single = aggregate(&[(0.3, 0.1)], 20);
        assert_eq!(single["HR@20"].std, 0.0);
        let two = MetricSummary::from_values(&[5.0, 6.0]);
        assert_eq!(two.mean, 5.5);
        assert!((two.std - 0.5f64.sqrt()).abs() < 1e-12);
        let all = aggregate(&[(1.0, 1.0)], 20);
        assert_eq!(format!("{:.2}", all["HR@20"].mean), "100.00");
        assert_eq!(csv_rows("full", &[1], &[(0.0578, 0.02)]), "full,1,5.78,2.00\n");
    }

    proptest! {
        #[test]
        fn tying_a_negative_never_helps(
            scores in prop::collection::vec(-3.0f64..3.0, 2..30),
            which in any::<prop::sample::Index>(),
        ) {
            let target = scores[0];
            let mut others = scores[1..].to_vec();
            let before = pessimistic_rank(target, &others);
            let k = which.index(others.len());
            let was_ahead = others[k] >= target;
            others[k] = target;
            let after = pessimistic_rank(target, &others);
            prop_assert!(after >= before);
            prop_assert_eq!(after, before + usize::from(!was_ahead));
        }

        #[test]
        fn ndcg_positive_iff_hit(rank in 1usize..200, k in 1usize..50) {
            let r = RankingResult::from_rank("u", rank, k);
            prop_assert!((0.0..=1.0).contains(&r.ndcg));
            prop_assert_eq!(r.ndcg > 0.0, r.hit == 1);
        }
    }
}
