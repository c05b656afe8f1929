//! Joint optimization of the diffusion and auxiliary losses, epoch loop with
//! early stopping, and the ablation runner.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamStore, Tape};
use crate::config::ModelConfig;
use crate::data::{Dataset, Sample, Split};
use crate::diffusion::diffusion_loss;
use crate::encoder::{item_row, NULL_GUIDANCE, PAD};
use crate::error::{CardError, Result};
use crate::evaluator::{aggregate, evaluate_model, EvalRun, EvalSettings, MetricsReport};
use crate::model::{CardModel, GuideMode, Path as RoutePath, Variant};
use crate::rng::{seeded_rng, CardRng};
use crate::stability::Verdict;
use crate::tensor::Matrix;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-sequence routing tallies. Exactly one of `per_passes`, `dts_calls`
/// and `identity_passes` grows for every sequence processed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub sequences: usize,
    /// Sequences whose stability score exceeded the threshold.
    pub low_stability: usize,
    pub per_passes: usize,
    pub dts_calls: usize,
    pub dts_removed: usize,
    pub identity_passes: usize,
}

impl Counters {
    pub fn merge(&mut self, other: &Counters) {
        self.sequences += other.sequences;
        self.low_stability += other.low_stability;
        self.per_passes += other.per_passes;
        self.dts_calls += other.dts_calls;
        self.dts_removed += other.dts_removed;
        self.identity_passes += other.identity_passes;
    }

    pub fn low_stability_fraction(&self) -> f64 {
        if self.sequences == 0 {
            0.0
        } else {
            self.low_stability as f64 / self.sequences as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub diffusion: f64,
    /// Mean auxiliary loss over the counterfactual-path sequences, 0 if none.
    pub aux: f64,
    pub total: f64,
}

/// Random streams consumed during training.
pub struct TrainRngs {
    pub route: CardRng,
    pub diffusion: CardRng,
    pub shuffle: CardRng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            route: seeded_rng(seed, "train-route"),
            diffusion: seeded_rng(seed, "train-diffusion"),
            shuffle: seeded_rng(seed, "train-shuffle"),
        }
    }
}

/// Optimizer, step count and counters of a run in progress.
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub adam: Adam,
    pub rngs: TrainRngs,
    pub counters: Counters,
}

impl TrainState {
    pub fn new(model: &CardModel, seed: u64) -> Self {
        TrainState {
            epoch: 1,
            step: 0,
            adam: Adam::new(&model.params, model.config.lr),
            rngs: TrainRngs::new(seed),
            counters: Counters::default(),
        }
    }
}

fn batch_diagnostic(batch: &[&Sample], losses: (f64, f64)) -> String {
    let users: Vec<String> = batch
        .iter()
        .take(16)
        .map(|s| format!("user {} history {:?} target {}", s.user, s.history, s.target))
        .collect();
    format!(
        "loss_diffusion={} loss_aux={} batch of {}: [{}{}]",
        losses.0,
        losses.1,
        batch.len(),
        users.join("; "),
        if batch.len() > 16 { "; ..." } else { "" }
    )
}

/// Routes, encodes and diffuses one batch, then applies one Adam update.
pub fn train_step(model: &mut CardModel, state: &mut TrainState, batch: &[&Sample], variant: Variant) -> Result<StepLosses> {
    assert!(!batch.is_empty(), "empty batch");
    state.step += 1;
    let mut grads = model.params.zero_grads();
    let mut counters = Counters::default();
    let losses = {
        let model = &*model;
        let mut tape = Tape::new(&model.params);
        let mut guidance = Vec::with_capacity(batch.len());
        let mut aux_terms = Vec::new();
        for s in batch {
            let out = model.guide(
                &mut tape,
                &s.history,
                GuideMode {
                    variant,
                    training: true,
                    rng: Some(&mut state.rngs.route),
                },
            );
            counters.sequences += 1;
            counters.low_stability += usize::from(out.processed.report.verdict == Verdict::LowStability);
            match out.processed.path {
                RoutePath::Reweight => counters.per_passes += 1,
                RoutePath::Dts => {
                    counters.dts_calls += 1;
                    counters.dts_removed += out.processed.dts.as_ref().map_or(0, |d| d.num_removed());
                }
                RoutePath::Identity => counters.identity_passes += 1,
            }
            guidance.push(out.guidance);
            aux_terms.extend(out.aux_loss);
        }
        let rows: Vec<usize> = batch.iter().map(|s| item_row(s.target)).collect();
        let targets = if model.config.detach_target {
            tape.constant(model.params.get(model.table).select_rows(&rows))
        } else {
            tape.gather(model.table, &rows)
        };
        let null = tape.gather(model.table, &[NULL_GUIDANCE]);
        let (diff, _) = diffusion_loss(
            &mut tape,
            &model.denoiser,
            targets,
            &guidance,
            null,
            &model.schedule,
            model.config.cond_dropout_p,
            &mut state.rngs.diffusion,
        );
        let (total, aux) = if aux_terms.is_empty() {
            (diff, None)
        } else {
            let stacked = tape.concat_rows(&aux_terms);
            let sum = tape.sum(stacked);
            let aux = tape.scale(sum, 1.0 / aux_terms.len() as f64);
            let weighted = tape.scale(aux, model.config.lambda_aux);
            (tape.add(diff, weighted), Some(aux))
        };
        let losses = StepLosses {
            diffusion: tape.scalar(diff),
            aux: aux.map_or(0.0, |a| tape.scalar(a)),
            total: tape.scalar(total),
        };
        if !losses.total.is_finite() {
            return Err(CardError::NonFiniteLoss {
                epoch: state.epoch,
                step: state.step,
                diagnostic: batch_diagnostic(batch, (losses.diffusion, losses.aux)),
            });
        }
        tape.backward(total, &mut grads);
        losses
    };
    if !grads.is_finite() {
        return Err(CardError::NonFiniteLoss {
            epoch: state.epoch,
            step: state.step,
            diagnostic: format!("non-finite gradient; {}", batch_diagnostic(batch, (losses.diffusion, losses.aux))),
        });
    }
    grads.get_mut(model.table).row_mut(PAD).fill(0.0);
    state.adam.step(&mut model.params, &grads);
    state.counters.merge(&counters);
    Ok(losses)
}

/// One JSON line per epoch. Free of wall-clock values so reruns compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_diffusion: f64,
    pub loss_aux: f64,
    pub per_passes: usize,
    pub dts_calls: usize,
    pub low_stability_fraction: f64,
    pub val_hr: Option<f64>,
    pub val_ndcg: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub counters: Counters,
    /// Per-epoch counters, aligned with `epochs`.
    pub epoch_counters: Vec<Counters>,
    pub best_epoch: usize,
    pub best_val_hr: Option<f64>,
    pub best_val_ndcg: Option<f64>,
    /// Training wall time per epoch, validation excluded.
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
        }
    }

    pub fn total_losses(&self, lambda_aux: f64) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| e.loss_diffusion + lambda_aux * e.loss_aux)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions<'a> {
    pub variant: Variant,
    /// Epoch log destination (JSON lines), truncated at start.
    pub log_path: Option<&'a Path>,
    /// Skip validation and early stopping.
    pub skip_validation: bool,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            variant: Variant::Full,
            log_path: None,
            skip_validation: false,
        }
    }
}

/// Trains for up to `config.epochs` epochs with early stopping on validation
/// HR@K and restores the best parameters.
pub fn run_training(model: &mut CardModel, data: &Dataset, split: &Split, opts: TrainOptions<'_>) -> Result<TrainReport> {
    if split.train.is_empty() {
        return Err(CardError::EmptyCorpus);
    }
    let config = model.config.clone();
    let mut state = TrainState::new(model, config.seed);
    let settings = EvalSettings::from_config(&config);
    let mut log = match opts.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CardError::io(dir, e))?;
            }
            Some(BufWriter::new(File::create(p).map_err(|e| CardError::io(p, e))?))
        }
        None => None,
    };
    let validate = !opts.skip_validation && !split.valid.is_empty();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        counters: Counters::default(),
        epoch_counters: Vec::new(),
        best_epoch: 0,
        best_val_hr: None,
        best_val_ndcg: None,
        epoch_seconds: Vec::new(),
    };
    let mut best_params: Option<ParamStore> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        state.counters = Counters::default();
        order.shuffle(&mut state.rngs.shuffle);
        let start = Instant::now();
        let (mut diff_sum, mut aux_sum, mut weight) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let losses = train_step(model, &mut state, &batch, opts.variant)?;
            diff_sum += losses.diffusion * batch.len() as f64;
            aux_sum += losses.aux * batch.len() as f64;
            weight += batch.len() as f64;
        }
        report.epoch_seconds.push(start.elapsed().as_secs_f64());

        let (val_hr, val_ndcg) = if validate && epoch % config.eval_every.max(1) == 0 {
            let run = evaluate_model(model, &split.valid, &data.sequences, opts.variant, &settings, config.seed)?;
            (Some(run.hr), Some(run.ndcg))
        } else {
            (None, None)
        };
        let entry = EpochLog {
            epoch,
            loss_diffusion: diff_sum / weight,
            loss_aux: aux_sum / weight,
            per_passes: state.counters.per_passes,
            dts_calls: state.counters.dts_calls,
            low_stability_fraction: state.counters.low_stability_fraction(),
            val_hr,
            val_ndcg,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(w, "{line}").map_err(|e| CardError::io(opts.log_path.unwrap_or(Path::new("")), e))?;
        }
        log::info!(
            "epoch {epoch}: diffusion {:.5} aux {:.5} per {} dts {}",
            entry.loss_diffusion,
            entry.loss_aux,
            entry.per_passes,
            entry.dts_calls
        );
        report.counters.merge(&state.counters);
        report.epoch_counters.push(state.counters);
        report.epochs.push(entry);

        if let Some(hr) = val_hr {
            if report.best_val_hr.is_none_or(|b| hr > b) {
                report.best_val_hr = Some(hr);
                report.best_val_ndcg = val_ndcg;
                report.best_epoch = epoch;
                best_params = Some(model.params.clone());
                since_best = 0;
            } else {
                since_best += config.eval_every.max(1);
                if since_best >= config.patience {
                    break;
                }
            }
        } else if !validate {
            report.best_epoch = epoch;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| CardError::io(opts.log_path.unwrap_or(Path::new("")), e))?;
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    Ok(report)
}

/// Builds, trains and test-evaluates one model.
pub struct RunOutcome {
    pub model: CardModel,
    pub train: TrainReport,
    pub test: EvalRun,
}

pub fn train_and_evaluate(config: &ModelConfig, data: &Dataset, split: &Split, opts: TrainOptions<'_>) -> Result<RunOutcome> {
    config.validate_structure()?;
    let mut model = CardModel::new(config.clone(), data.vocab.len(), &mut seeded_rng(config.seed, "init"));
    let train = run_training(&mut model, data, split, opts)?;
    let test = evaluate_model(
        &model,
        &split.test,
        &data.sequences,
        opts.variant,
        &EvalSettings::from_config(config),
        config.seed,
    )?;
    Ok(RunOutcome { model, train, test })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReport {
    pub metrics: MetricsReport,
    pub seeds: Vec<u64>,
    /// `(hr, ndcg)` fractions per seed.
    pub runs: Vec<(f64, f64)>,
    pub mean_epoch_seconds: f64,
    pub mean_eval_seconds_per_batch: f64,
    pub counters: Counters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: BTreeMap<String, VariantReport>,
    /// Full minus each other variant, HR@K mean in percentage points.
    pub hr_delta_vs_full: BTreeMap<String, f64>,
}

/// Trains and evaluates each variant once per seed under otherwise identical
/// settings.
pub fn run_ablation(config: &ModelConfig, data: &Dataset, split: &Split, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    let mut out = BTreeMap::new();
    for &variant in variants {
        let mut runs = Vec::new();
        let mut epoch_secs = Vec::new();
        let mut eval_secs = Vec::new();
        let mut counters = Counters::default();
        for &seed in seeds {
            let cfg = ModelConfig { seed, ..config.clone() };
            let outcome = train_and_evaluate(
                &cfg,
                data,
                split,
                TrainOptions {
                    variant,
                    ..TrainOptions::default()
                },
            )?;
            log::info!("{} seed {seed}: HR {:.4}", variant.name(), outcome.test.hr);
            runs.push((outcome.test.hr, outcome.test.ndcg));
            epoch_secs.push(outcome.train.mean_epoch_seconds());
            eval_secs.push(outcome.test.seconds_per_batch);
            counters.merge(&outcome.train.counters);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        out.insert(
            variant.name().to_string(),
            VariantReport {
                metrics: aggregate(&runs, config.top_k),
                seeds: seeds.to_vec(),
                runs,
                mean_epoch_seconds: mean(&epoch_secs),
                mean_eval_seconds_per_batch: mean(&eval_secs),
                counters,
            },
        );
    }
    let hr_key = format!("HR@{}", config.top_k);
    let mut deltas = BTreeMap::new();
    if let Some(full) = out.get(Variant::Full.name()) {
        let full_hr = full.metrics[&hr_key].mean;
        for (name, rep) in &out {
            if name != Variant::Full.name() {
                deltas.insert(name.clone(), full_hr - rep.metrics[&hr_key].mean);
            }
        }
    }
    Ok(AblationReport {
        variants: out,
        hr_delta_vs_full: deltas,
    })
}
