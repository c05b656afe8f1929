//! Model and run configuration.
//!
//! Configs are flat TOML tables. Every key can be overridden from the command
//! line with a flag of the same name; overrides are applied on top of the
//! file before validation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dts::DtsParams;
use crate::error::{CardError, Result};

/// Similarity used to rank candidates against a generated embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    InnerProduct,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Histories longer than this keep only their most recent items.
    pub max_history_len: usize,
    /// Entropy threshold separating high- from low-stability sequences.
    pub lambda_stb: f64,
    /// Future window length for the auxiliary prediction target.
    #[serde(rename = "W")]
    pub window: usize,
    /// Temperature applied to prediction-error reductions before `tanh`.
    #[serde(rename = "T")]
    pub temperature: f64,
    /// Number of diffusion steps.
    #[serde(rename = "tau_S")]
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Classifier-free guidance strength `w`.
    pub guidance_strength: f64,
    pub cond_dropout_p: f64,
    pub lambda_aux: f64,
    pub neg_samples: usize,
    #[serde(rename = "K")]
    pub top_k: usize,
    pub seed: u64,

    pub dts_alpha0: f64,
    pub dts_beta0: f64,
    pub dts_max_removal_frac: f64,
    pub dts_min_history: usize,
    pub dts_pseudo_counts: f64,

    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ffn_hidden: usize,
    pub denoiser_hidden: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Validate every this many epochs (early stopping granularity).
    pub eval_every: usize,

    /// Treat target embeddings as constants in the diffusion and auxiliary losses.
    pub detach_target: bool,
    /// Route on the embeddings captured at initialization instead of the live table.
    pub freeze_routing_embeddings: bool,
    /// When non-zero, only the `m` positions with the lowest adjacent continuity
    /// receive counterfactual weights.
    pub candidate_filter: usize,
    pub scoring: Scoring,
    /// Rank against every item instead of sampled negatives (debugging only).
    pub full_ranking: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            max_history_len: 50,
            lambda_stb: 1.0,
            window: 3,
            temperature: 1.0,
            diffusion_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            guidance_strength: 2.0,
            cond_dropout_p: 0.1,
            lambda_aux: 0.1,
            neg_samples: 100,
            top_k: 20,
            seed: 1,
            dts_alpha0: 1.0,
            dts_beta0: 1.0,
            dts_max_removal_frac: 0.3,
            dts_min_history: 2,
            dts_pseudo_counts: 10.0,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            ffn_hidden: 128,
            denoiser_hidden: 128,
            lr: 1e-3,
            batch_size: 256,
            epochs: 200,
            patience: 20,
            eval_every: 1,
            detach_target: true,
            freeze_routing_embeddings: false,
            candidate_filter: 0,
            scoring: Scoring::InnerProduct,
            full_ranking: false,
        }
    }
}

impl ModelConfig {
    pub fn dts_params(&self) -> DtsParams {
        DtsParams {
            alpha0: self.dts_alpha0,
            beta0: self.dts_beta0,
            max_removal_frac: self.dts_max_removal_frac,
            min_history: self.dts_min_history,
            pseudo_counts: self.dts_pseudo_counts,
        }
    }

    /// Checks every documented range; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.lambda_stb) {
            return Err(CardError::range(
                "lambda_stb",
                format!("lambda_stb must be in [0.5, 2.0], got {}", self.lambda_stb),
            ));
        }
        if ![1, 3, 5].contains(&self.window) {
            return Err(CardError::range(
                "W",
                format!("W must be in {{1,3,5}}, got {}", self.window),
            ));
        }
        self.validate_structure()
    }

    /// Checks only what the model needs to run. Leaves `lambda_stb` and `W`
    /// free so routing extremes can be built in code.
    pub fn validate_structure(&self) -> Result<()> {
        fn positive(key: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(CardError::range(key, format!("must be > 0, got {v}")))
            }
        }
        fn unit(key: &str, v: f64) -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CardError::range(key, format!("must be in [0, 1], got {v}")))
            }
        }
        fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
            if v >= min {
                Ok(())
            } else {
                Err(CardError::range(key, format!("must be >= {min}, got {v}")))
            }
        }

        at_least("d", self.d, 1)?;
        at_least("max_history_len", self.max_history_len, 2)?;
        if self.lambda_stb.is_nan() {
            return Err(CardError::range("lambda_stb", "must be a number"));
        }
        at_least("W", self.window, 1)?;
        positive("T", self.temperature)?;
        at_least("tau_S", self.diffusion_steps, 1)?;
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(CardError::range("beta_start", "must be in (0, 1)"));
        }
        if !(self.beta_end >= self.beta_start && self.beta_end < 1.0) {
            return Err(CardError::range("beta_end", "must be in [beta_start, 1)"));
        }
        if !(self.guidance_strength.is_finite() && self.guidance_strength >= 0.0) {
            return Err(CardError::range("guidance_strength", "must be >= 0"));
        }
        unit("cond_dropout_p", self.cond_dropout_p)?;
        if !(self.lambda_aux.is_finite() && self.lambda_aux >= 0.0) {
            return Err(CardError::range("lambda_aux", "must be >= 0"));
        }
        at_least("neg_samples", self.neg_samples, 1)?;
        at_least("K", self.top_k, 1)?;
        positive("dts_alpha0", self.dts_alpha0)?;
        positive("dts_beta0", self.dts_beta0)?;
        if !(0.0..1.0).contains(&self.dts_max_removal_frac) {
            return Err(CardError::range("dts_max_removal_frac", "must be in [0, 1)"));
        }
        at_least("dts_min_history", self.dts_min_history, 2)?;
        positive("dts_pseudo_counts", self.dts_pseudo_counts)?;
        at_least("layers", self.layers, 1)?;
        at_least("heads", self.heads, 1)?;
        if !self.d.is_multiple_of(self.heads) {
            return Err(CardError::range(
                "heads",
                format!("d = {} is not divisible by heads = {}", self.d, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CardError::range("dropout", "must be in [0, 1)"));
        }
        at_least("ffn_hidden", self.ffn_hidden, 1)?;
        at_least("denoiser_hidden", self.denoiser_hidden, 1)?;
        positive("lr", self.lr)?;
        at_least("batch_size", self.batch_size, 1)?;
        at_least("epochs", self.epochs, 1)?;
        at_least("eval_every", self.eval_every, 1)?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CardError::ConfigParse(e.to_string()))
    }

    /// Applies `key = value` overrides. Values are parsed as TOML scalars,
    /// falling back to bare strings.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, String>) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml_string())
            .map_err(|e| CardError::ConfigParse(e.to_string()))?;
        for (key, raw) in overrides {
            if !table.contains_key(key) {
                return Err(CardError::range(key, "unknown config key"));
            }
            table.insert(key.clone(), parse_scalar(raw));
        }
        let text = toml::to_string(&table).map_err(|e| CardError::ConfigParse(e.to_string()))?;
        let cfg = Self::from_toml_str(&text)?;
        Ok(cfg)
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let parsed: std::result::Result<toml::Table, _> = toml::from_str(&format!("v = {raw}"));
    match parsed.ok().and_then(|mut t| t.remove("v")) {
        // integers are accepted where floats are expected
        Some(v) => v,
        None => toml::Value::String(raw.to_string()),
    }
}

/// Reads a config file (if given), applies overrides and validates.
pub fn load_config(path: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CardError::io(p, e))?;
            ModelConfig::from_toml_str(&text)?
        }
        None => ModelConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
