use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveOptions, LossWeights};
use crate::data::{SplitSpec, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::PredictionMode;
use crate::model::{DecoderMode, ModelConfig};

/// Which contrastive term, if any, joins the trajectory loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Trajectory loss only.
    None,
    /// Instance discrimination between each sample and its noisy view.
    Simclr,
    /// Action-class contrastive loss over real and augmented rows.
    Abc,
    /// As `Abc`, plus decoded synthetic futures as extra positives/negatives.
    AbcPlus,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::None, Regime::Simclr, Regime::Abc, Regime::AbcPlus];

    pub fn name(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::Simclr => "simclr",
            Regime::Abc => "abc",
            Regime::AbcPlus => "abc_plus",
        }
    }

    pub fn uses_labels(self) -> bool {
        matches!(self, Regime::Abc | Regime::AbcPlus)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}` (expected none, simclr, abc or abc_plus)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// JSONL dataset; the synthetic generator runs when absent.
    pub path: Option<PathBuf>,
    /// One label per line; inferred from the dataset when absent.
    pub vocab: Option<PathBuf>,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Frames between consecutive window starts.
    pub stride: usize,
    pub split: SplitSpec,
    /// Seeds the record shuffle behind fractional splits, independent of the
    /// run seed so runs with different seeds share one test set.
    pub split_seed: u64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            vocab: None,
            t_obs: 5,
            t_pred: 15,
            stride: 5,
            split: SplitSpec::default(),
            split_seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_h: usize,
    pub d_z: usize,
    pub decoder: DecoderMode,
    pub k_bom: usize,
    pub lambda_kl: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_h: m.d_h,
            d_z: m.d_z,
            decoder: m.decoder,
            k_bom: m.k_bom,
            lambda_kl: m.lambda_kl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub regime: Regime,
    /// Weight of the contrastive term.
    pub beta: f64,
    /// Similarity temperature.
    pub tau: f64,
    /// Noise std for augmented views, in normalized units.
    pub epsilon_sigma: f64,
    /// Synthetic samples per real sample (regime `abc_plus`).
    pub l_synth: usize,
    /// Count positives in the denominator as well (supervised-contrastive form).
    pub positives_in_denominator: bool,
    /// Cosine instead of raw dot-product similarity.
    pub unit_normalize: bool,
    /// Epochs of trajectory-only training before synthetic injection starts
    /// (regime `abc_plus` with the in-training generator only).
    pub warmup_epochs: usize,
    /// Frozen external generator for synthetic samples.
    pub generator_checkpoint: Option<PathBuf>,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            regime: Regime::Abc,
            beta: w.beta,
            tau: w.tau,
            epsilon_sigma: w.epsilon_sigma,
            l_synth: w.l_synth,
            positives_in_denominator: false,
            unit_normalize: false,
            warmup_epochs: 1,
            generator_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm limit; no clipping when absent.
    pub clip_norm: Option<f64>,
    /// Spread action classes across batches.
    pub balance_batches: bool,
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            tau: self.tau,
            epsilon_sigma: self.epsilon_sigma,
            l_synth: self.l_synth,
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 1e-3,
            batch_size: 128,
            epochs: 50,
            clip_norm: None,
            balance_batches: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Prediction horizons in seconds.
    pub horizons: Vec<f64>,
    /// Samples per window for best-of-L scoring.
    pub samples: usize,
    pub mode: PredictionMode,
    pub batch_size: usize,
    /// Write every sampled box to `predictions.csv`.
    pub dump_predictions: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            horizons: vec![0.5, 1.0, 1.5],
            samples: 20,
            mode: PredictionMode::BestOfL,
            batch_size: 256,
            dump_predictions: true,
        }
    }
}

/// Everything a run needs, loadable from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Record elapsed seconds in each step report (breaks byte-identical logs).
    pub log_wall_time: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            log_wall_time: false,
            data: DataSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            optim: OptimSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalized()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    /// Applies the regime rules and validates: `none` forces `beta = 0`,
    /// `abc_plus` needs `l_synth >= 1`.
    pub fn normalized(mut self) -> Result<Self> {
        if self.loss.regime == Regime::None && self.loss.beta != 0.0 {
            log::info!("regime none: ignoring beta = {}", self.loss.beta);
            self.loss.beta = 0.0;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model_config().validate()?;
        self.loss.weights().validate()?;
        self.data.split.validate()?;
        if self.data.path.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.data.stride == 0 {
            return bad("data.stride must be >= 1".into());
        }
        if self.loss.regime == Regime::None && self.loss.beta != 0.0 {
            return bad("regime none requires beta = 0".into());
        }
        if self.loss.regime == Regime::AbcPlus && self.loss.l_synth == 0 {
            return bad("regime abc_plus requires l_synth >= 1".into());
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return bad(format!("optim.lr must be > 0, got {}", self.optim.lr));
        }
        if self.optim.batch_size < 2 {
            return bad(format!("optim.batch_size must be >= 2, got {}", self.optim.batch_size));
        }
        if let Some(c) = self.optim.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("optim.clip_norm must be > 0, got {c}"));
            }
        }
        if self.eval.samples == 0 || self.eval.batch_size == 0 {
            return bad("eval.samples and eval.batch_size must be >= 1".into());
        }
        if self.eval.horizons.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return bad(format!("horizons must be positive, got {:?}", self.eval.horizons));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_h: self.model.d_h,
            d_z: self.model.d_z,
            t_obs: self.data.t_obs,
            t_pred: self.data.t_pred,
            decoder: self.model.decoder,
            k_bom: self.model.k_bom,
            lambda_kl: self.model.lambda_kl,
        }
    }

    pub fn contrastive_options(&self) -> ContrastiveOptions {
        ContrastiveOptions {
            tau: self.loss.tau,
            positives_in_denominator: self.loss.positives_in_denominator,
            unit_normalize: self.loss.unit_normalize,
        }
    }
}
