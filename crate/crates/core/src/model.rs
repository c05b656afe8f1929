//! The full recommender: item table, causal encoder, auxiliary future-window
//! head and denoiser, plus the per-history processing route.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::counterfactual::{
    candidate_positions, future_window_target, per_records_from_predictions, weights_from_records,
    AuxPredictor, PerRecord,
};
use crate::diffusion::{
    sample_batch, Denoiser, DenoiserInput, DenoiserNet, Guidance, NoiseSchedule, TapeDenoiser,
};
use crate::dts::{dts_simplify, DtsOutcome};
use crate::encoder::{
    init_weight, item_row, normal_matrix, DropoutCtx, EncoderParams, SequenceEncoder, NULL_GUIDANCE,
    NUM_SPECIAL, PAD,
};
use crate::rng::CardRng;
use crate::stability::{assess, StabilityReport, Verdict};
use crate::tensor::Matrix;

/// Which parts of the guidance pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Route by stability: redundancy removal or counterfactual weights.
    Full,
    /// Counterfactual weights for every history.
    NoRouting,
    /// Redundancy removal for every history.
    NoAttention,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRouting => "no_routing",
            Variant::NoAttention => "no_attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Variant::Full),
            "no_routing" => Some(Variant::NoRouting),
            "no_attention" => Some(Variant::NoAttention),
            _ => None,
        }
    }
}

/// Path a history took before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    Dts,
    Reweight,
    Identity,
}

/// Auxiliary future-window predictor: two SiLU layers `d → d → d`.
#[derive(Debug, Clone)]
pub struct AuxHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl AuxHead {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        AuxHead {
            w1: store.add("aux.l1.weight", init_weight(rng, d, d)),
            b1: store.add("aux.l1.bias", Matrix::zeros(1, d)),
            w2: store.add("aux.l2.weight", init_weight(rng, d, d)),
            b2: store.add("aux.l2.bias", Matrix::zeros(1, d)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, hidden: Var) -> Var {
        let h = tape.linear(hidden, self.w1, self.b1);
        let h = tape.silu(h);
        tape.linear(h, self.w2, self.b2)
    }
}

/// [`AuxPredictor`] view of an [`AuxHead`] with fixed parameters.
pub struct BoundAux<'a> {
    head: &'a AuxHead,
    params: &'a ParamStore,
}

impl AuxPredictor for BoundAux<'_> {
    fn predict(&self, hidden: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(self.params);
        let h = tape.constant(Matrix::row_vector(hidden));
        let out = self.head.forward(&mut tape, h);
        tape.value(out).data().to_vec()
    }
}

/// What happened to one history on its way to the encoder.
#[derive(Debug, Clone)]
pub struct Processed {
    pub report: StabilityReport,
    pub path: Path,
    /// Table rows fed to the encoder.
    pub rows: Vec<usize>,
    pub weights: Option<Vec<f64>>,
    pub dts: Option<DtsOutcome>,
    pub per_records: Vec<PerRecord>,
}

/// Output of [`CardModel::guide`] on a tape.
pub struct Guided {
    pub processed: Processed,
    /// `1×d` guidance node.
    pub guidance: Var,
    /// Auxiliary loss for this history when the counterfactual pass ran.
    pub aux_loss: Option<Var>,
}

/// Randomness and switches for one guidance computation.
pub struct GuideMode<'r> {
    pub variant: Variant,
    pub training: bool,
    /// Needed for redundancy removal and dropout; `None` disables both.
    pub rng: Option<&'r mut CardRng>,
}

#[derive(Debug, Clone)]
pub struct CardModel {
    pub config: ModelConfig,
    pub n_items: usize,
    pub params: ParamStore,
    pub table: ParamId,
    pub encoder: SequenceEncoder,
    pub aux: AuxHead,
    pub denoiser: DenoiserNet,
    pub schedule: NoiseSchedule,
    /// Embedding values used for routing when routing is frozen.
    routing_snapshot: Option<Matrix>,
}

impl CardModel {
    pub fn new(config: ModelConfig, n_items: usize, rng: &mut CardRng) -> Self {
        let d = config.d;
        let mut params = ParamStore::new();
        let mut table = normal_matrix(rng, n_items + NUM_SPECIAL, d, 1.0 / (d as f64).sqrt());
        table.row_mut(PAD).fill(0.0);
        let table = params.add("embeddings", table);
        let encoder = SequenceEncoder::new(
            &mut params,
            EncoderParams {
                d,
                layers: config.layers,
                heads: config.heads,
                ffn_hidden: config.ffn_hidden,
                dropout: config.dropout,
                max_len: config.max_history_len,
            },
            rng,
        );
        let aux = AuxHead::new(&mut params, d, rng);
        let denoiser = DenoiserNet::new(&mut params, d, config.denoiser_hidden, rng);
        let schedule = NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end);
        let routing_snapshot = config
            .freeze_routing_embeddings
            .then(|| params.get(table).clone());
        CardModel {
            config,
            n_items,
            params,
            table,
            encoder,
            aux,
            denoiser,
            schedule,
            routing_snapshot,
        }
    }

    /// Rebuilds a model around loaded parameter values.
    pub fn with_params(config: ModelConfig, n_items: usize, params: ParamStore) -> Option<Self> {
        let mut rng = crate::rng::seeded_rng(0, "shape");
        let mut model = CardModel::new(config, n_items, &mut rng);
        if model.params.len() != params.len() {
            return None;
        }
        for ((name_a, a), (name_b, b)) in model.params.iter().zip(params.iter()) {
            if name_a != name_b || a.shape() != b.shape() {
                return None;
            }
        }
        model.params = params;
        if model.config.freeze_routing_embeddings {
            model.routing_snapshot = Some(model.params.get(model.table).clone());
        }
        Some(model)
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn embedding(&self, item: usize) -> &[f64] {
        self.params.get(self.table).row(item_row(item))
    }

    /// Item embeddings only, row `i` for item `i`.
    pub fn item_matrix(&self) -> Matrix {
        let table = self.params.get(self.table);
        let d = table.cols();
        Matrix::from_vec(self.n_items, d, table.data()[NUM_SPECIAL * d..].to_vec())
    }

    pub fn null_embedding(&self) -> &[f64] {
        self.params.get(self.table).row(NULL_GUIDANCE)
    }

    pub fn embeddings_of(&self, items: &[usize]) -> Vec<Vec<f64>> {
        items.iter().map(|&i| self.embedding(i).to_vec()).collect()
    }

    fn routing_embeddings(&self, items: &[usize]) -> Vec<Vec<f64>> {
        match &self.routing_snapshot {
            Some(snap) => items.iter().map(|&i| snap.row(item_row(i)).to_vec()).collect(),
            None => self.embeddings_of(items),
        }
    }

    pub fn aux_predictor(&self) -> BoundAux<'_> {
        BoundAux {
            head: &self.aux,
            params: &self.params,
        }
    }

    /// Most recent `max_history_len` items.
    pub fn truncate<'a>(&self, history: &'a [usize]) -> &'a [usize] {
        &history[history.len().saturating_sub(self.config.max_history_len)..]
    }

    pub fn stability(&self, history: &[usize]) -> StabilityReport {
        assess(&self.routing_embeddings(history), self.config.lambda_stb)
    }

    /// Causal hidden states `h_0..h_L` of an unweighted history.
    pub fn hidden_states(&self, history: &[usize]) -> Matrix {
        let rows: Vec<usize> = history.iter().map(|&i| item_row(i)).collect();
        let mut tape = Tape::new(&self.params);
        let (h, _) = self
            .encoder
            .encode::<CardRng>(&mut tape, self.table, &rows, None, None);
        tape.value(h).clone()
    }

    /// Counterfactual records of every scorable position, regardless of route.
    pub fn per_records(&self, history: &[usize]) -> Vec<PerRecord> {
        let history = self.truncate(history);
        let hidden = self.hidden_states(history);
        let aux = self.aux_predictor();
        let preds: Vec<Vec<f64>> = (0..history.len()).map(|n| aux.predict(hidden.row(n))).collect();
        let mut padded = preds;
        padded.push(Vec::new());
        let embs = self.embeddings_of(history);
        let report = self.stability(history);
        let candidates = self.candidate_mask(&report);
        per_records_from_predictions(
            &embs,
            &padded,
            self.config.window,
            self.config.temperature,
            candidates.as_deref(),
        )
    }

    fn candidate_mask(&self, report: &StabilityReport) -> Option<Vec<bool>> {
        (self.config.candidate_filter > 0)
            .then(|| candidate_positions(&report.con, self.config.candidate_filter))
    }

    /// Processes `history` per `mode.variant`, encodes it on `tape` and
    /// returns the guidance node.
    ///
    /// During training a high-stability history goes through redundancy
    /// removal; at inference it is encoded as is. Low-stability histories get
    /// counterfactual weights in both cases.
    pub fn guide(&self, tape: &mut Tape, history: &[usize], mut mode: GuideMode<'_>) -> Guided {
        let history = self.truncate(history);
        assert!(history.len() >= 2, "history must hold at least two items");
        let report = self.stability(history);
        let reweight = match mode.variant {
            Variant::Full => report.verdict == Verdict::LowStability,
            Variant::NoRouting => true,
            Variant::NoAttention => false,
        };
        let rows: Vec<usize> = history.iter().map(|&i| item_row(i)).collect();
        let p = self.config.dropout;
        let training = mode.training;

        macro_rules! dropout {
            () => {
                match (&mut mode.rng, training) {
                    (Some(rng), true) => Some(DropoutCtx { rng: &mut **rng, p }),
                    _ => None,
                }
            };
        }

        if reweight {
            let (hidden, _) = self
                .encoder
                .encode(tape, self.table, &rows, None, dropout!());
            let len = history.len();
            let prefix_rows: Vec<usize> = (0..len).collect();
            let hs = tape.select_rows(hidden, &prefix_rows);
            let preds = self.aux.forward(tape, hs);
            let embs = self.embeddings_of(history);
            let targets: Vec<Vec<f64>> = (0..len)
                .map(|n| {
                    future_window_target(&embs, n, self.config.window)
                        .expect("prefixes shorter than the history have a window")
                })
                .collect();
            let aux_loss = if training {
                let t = tape.constant(Matrix::from_rows(&targets));
                let diff = tape.sub(preds, t);
                let sq = tape.sum_squares(diff);
                Some(tape.scale(sq, 1.0 / len as f64))
            } else {
                None
            };
            let pred_vals = tape.value(preds).clone();
            let mut pred_rows: Vec<&[f64]> = (0..len).map(|n| pred_vals.row(n)).collect();
            pred_rows.push(&[]);
            let candidates = self.candidate_mask(&report);
            let records = per_records_from_predictions(
                &embs,
                &pred_rows,
                self.config.window,
                self.config.temperature,
                candidates.as_deref(),
            );
            let weights = weights_from_records(len, &records);
            let (hidden, last) = self
                .encoder
                .encode(tape, self.table, &rows, Some(&weights), dropout!());
            let guidance = tape.select_rows(hidden, &[last]);
            return Guided {
                processed: Processed {
                    report,
                    path: Path::Reweight,
                    rows,
                    weights: Some(weights),
                    dts: None,
                    per_records: records,
                },
                guidance,
                aux_loss,
            };
        }

        let min_history = self.config.dts_min_history;
        let removal_rng = mode.rng.as_mut().filter(|_| training && history.len() > min_history);
        let (path, kept_rows, dts) = if let Some(rng) = removal_rng {
            let outcome = dts_simplify(&report.con, &self.config.dts_params(), &mut **rng);
            let kept: Vec<usize> = outcome.kept.iter().map(|&i| rows[i]).collect();
            (Path::Dts, kept, Some(outcome))
        } else {
            (Path::Identity, rows.clone(), None)
        };
        let (hidden, last) = self
            .encoder
            .encode(tape, self.table, &kept_rows, None, dropout!());
        let guidance = tape.select_rows(hidden, &[last]);
        Guided {
            processed: Processed {
                report,
                path,
                rows: kept_rows,
                weights: None,
                dts,
                per_records: Vec::new(),
            },
            guidance,
            aux_loss: None,
        }
    }

    /// Inference-time guidance vectors for many histories.
    pub fn guidance_matrix(&self, histories: &[&[usize]], variant: Variant) -> Matrix {
        let rows: Vec<Vec<f64>> = histories
            .iter()
            .map(|h| {
                let mut tape = Tape::new(&self.params);
                let out = self.guide(
                    &mut tape,
                    h,
                    GuideMode {
                        variant,
                        training: false,
                        rng: None,
                    },
                );
                tape.value(out.guidance).data().to_vec()
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    pub fn denoise(&self, input: &DenoiserInput) -> Vec<f64> {
        let g = match &input.guidance {
            Guidance::Conditional(g) => g.clone(),
            Guidance::Null => self.null_embedding().to_vec(),
        };
        self.denoise_batch(
            &Matrix::row_vector(&input.noised),
            &Matrix::row_vector(&g),
            &[input.step],
        )
        .into_data()
    }

    pub fn generate(&self, guidance: &Matrix, rng: &mut CardRng) -> Matrix {
        sample_batch(self, guidance, &self.schedule, self.config.guidance_strength, rng)
    }
}

impl Denoiser for CardModel {
    fn dim(&self) -> usize {
        self.config.d
    }

    fn null_guidance(&self) -> Vec<f64> {
        self.null_embedding().to_vec()
    }

    fn denoise_batch(&self, noised: &Matrix, guidance: &Matrix, steps: &[usize]) -> Matrix {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(noised.clone());
        let g = tape.constant(guidance.clone());
        let out = self.denoiser.forward(&mut tape, x, g, steps);
        tape.value(out).clone()
    }
}
