//! Run configuration: defaults, key=value config files, and environment
//! overrides. Precedence is defaults < file < environment < command line;
//! every file key can also be set through `RNF_<KEY>` (upper-cased).

use std::fmt;
use std::path::{Path, PathBuf};

use rnf_core::nets::{Injection, ModelConfig};
use rnf_core::objectives::Objective;
use rnf_core::rnf::KernelKind;

use crate::{HarnessError, Result};

/// Environment variable prefix for config overrides.
pub const ENV_PREFIX: &str = "RNF_";

/// Everything a run needs. Field names double as config-file keys (and,
/// upper-cased with the `RNF_` prefix, as environment variable names).
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Training objective: vae, vae-nf, wae, wae-nf, wae-rnf.
    pub objective: Objective,
    /// Number of planar flows in the stack.
    pub flows: usize,
    /// Number of posterior clusters for the kernel regularizer.
    pub clusters: usize,
    /// Kernel family for the regularizer: imq or gaussian.
    pub kernel: KernelKind,
    /// Latent dimensionality.
    pub latent: usize,
    /// LSTM hidden width (encoder and decoder).
    pub hidden: usize,
    /// Token embedding width.
    pub embedding: usize,
    /// Hidden width of the posterior heads.
    pub head_hidden: usize,
    /// Latent injection: init-state or init-state-concat.
    pub injection: Injection,
    /// Decoder dropout rate in [0, 1).
    pub dropout: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Evaluation batch size; 0 means reuse `batch_size`.
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Constant KL weight for the plain ELBO objectives.
    pub beta: f64,
    /// Final annealed KL weight.
    pub alpha_end: f64,
    /// Epochs over which the KL weight ramps up.
    pub ramp_epochs: f64,
    pub lr: f64,
    /// Global gradient-norm clipping threshold.
    pub clip: f64,
    /// Fraction of the epoch budget spent on plain-ELBO pre-training before
    /// clusters are gathered (wae-rnf without a cluster artifact only).
    pub pretrain_fraction: f64,
    /// Pre-gathered cluster artifact; when set, no pre-training phase runs.
    pub cluster_path: Option<PathBuf>,
    /// Directory holding train.txt and dev.txt; unset means the built-in
    /// synthetic grammar.
    pub data_dir: Option<PathBuf>,
    /// Output directory for checkpoints, metrics, and artifacts.
    pub out_dir: PathBuf,
    /// Checkpoint to resume from.
    pub resume: Option<PathBuf>,
    /// Synthetic training sentences when no data directory is given.
    pub synthetic_sentences: usize,
    /// Synthetic dev sentences when no data directory is given.
    pub synthetic_dev_sentences: usize,
    /// Vocabulary cap (including reserved ids) when building from text.
    pub vocab_cap: usize,
    /// Monte-Carlo samples for the mutual-information estimate.
    pub mi_samples: usize,
    /// When nonzero, also write the rolling checkpoint every this many
    /// optimizer steps (epoch boundaries always write one).
    pub checkpoint_every_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            objective: Objective::Vae,
            flows: 3,
            clusters: 20,
            kernel: KernelKind::InverseMultiquadratic,
            latent: 32,
            hidden: 200,
            embedding: 200,
            head_hidden: 200,
            injection: Injection::InitStateConcat,
            dropout: 0.2,
            epochs: 48,
            steps_per_epoch: 2000,
            batch_size: 32,
            eval_batch_size: 0,
            seed: 1,
            beta: 1.0,
            alpha_end: 0.8,
            ramp_epochs: 21.0,
            lr: 1e-3,
            clip: 5.0,
            pretrain_fraction: 0.25,
            cluster_path: None,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            resume: None,
            synthetic_sentences: 2000,
            synthetic_dev_sentences: 500,
            vocab_cap: 10_000,
            mi_samples: 256,
            checkpoint_every_steps: 0,
        }
    }
}

/// All recognized config keys, used for the environment sweep and for error
/// messages on unknown file keys.
pub const KEYS: &[&str] = &[
    "objective",
    "flows",
    "clusters",
    "kernel",
    "latent",
    "hidden",
    "embedding",
    "head_hidden",
    "injection",
    "dropout",
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "eval_batch_size",
    "seed",
    "beta",
    "alpha_end",
    "ramp_epochs",
    "lr",
    "clip",
    "pretrain_fraction",
    "cluster_path",
    "data_dir",
    "out_dir",
    "resume",
    "synthetic_sentences",
    "synthetic_dev_sentences",
    "vocab_cap",
    "mi_samples",
    "checkpoint_every_steps",
];

fn bad(key: &str, value: &str, want: &str) -> HarnessError {
    HarnessError::Config(format!("key `{key}`: cannot read `{value}` as {want}"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(key, value, "an integer"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| bad(key, value, "an integer"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "objective" => {
                self.objective = value
                    .parse()
                    .map_err(|_| bad(key, value, "one of vae, vae-nf, wae, wae-nf, wae-rnf"))?;
            }
            "flows" => self.flows = parse_usize(key, value)?,
            "clusters" => self.clusters = parse_usize(key, value)?,
            "kernel" => {
                self.kernel = match value {
                    "imq" | "inverse-multiquadric" => KernelKind::InverseMultiquadratic,
                    "gaussian" | "rbf" => KernelKind::Gaussian,
                    _ => return Err(bad(key, value, "imq or gaussian")),
                };
            }
            "latent" => self.latent = parse_usize(key, value)?,
            "hidden" => self.hidden = parse_usize(key, value)?,
            "embedding" => self.embedding = parse_usize(key, value)?,
            "head_hidden" => self.head_hidden = parse_usize(key, value)?,
            "injection" => {
                self.injection = match value {
                    "init-state" => Injection::InitState,
                    "init-state-concat" => Injection::InitStateConcat,
                    _ => return Err(bad(key, value, "init-state or init-state-concat")),
                };
            }
            "dropout" => self.dropout = parse_f64(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_usize(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse_usize(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "beta" => self.beta = parse_f64(key, value)?,
            "alpha_end" => self.alpha_end = parse_f64(key, value)?,
            "ramp_epochs" => self.ramp_epochs = parse_f64(key, value)?,
            "lr" => self.lr = parse_f64(key, value)?,
            "clip" => self.clip = parse_f64(key, value)?,
            "pretrain_fraction" => self.pretrain_fraction = parse_f64(key, value)?,
            "cluster_path" => self.cluster_path = non_empty_path(value),
            "data_dir" => self.data_dir = non_empty_path(value),
            "out_dir" => {
                if value.is_empty() {
                    return Err(bad(key, value, "a path"));
                }
                self.out_dir = PathBuf::from(value);
            }
            "resume" => self.resume = non_empty_path(value),
            "synthetic_sentences" => self.synthetic_sentences = parse_usize(key, value)?,
            "synthetic_dev_sentences" => self.synthetic_dev_sentences = parse_usize(key, value)?,
            "vocab_cap" => self.vocab_cap = parse_usize(key, value)?,
            "mi_samples" => self.mi_samples = parse_usize(key, value)?,
            "checkpoint_every_steps" => self.checkpoint_every_steps = parse_usize(key, value)?,
            _ => {
                return Err(HarnessError::Config(format!(
                    "unknown config key `{key}` (known keys: {})",
                    KEYS.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Parse a key=value config file. Blank lines and `#` comments are
    /// skipped; every other line must be `key = value`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `RNF_<KEY>` environment overrides for every known key.
    pub fn apply_env(&mut self) -> Result<()> {
        for key in KEYS {
            let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
            if let Ok(value) = std::env::var(&var) {
                self.set(key, value.trim())?;
            }
        }
        Ok(())
    }

    /// Standard load order: defaults, then the optional file, then the
    /// environment. Command-line flags are applied by the caller afterwards.
    pub fn load(file: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// Sanity-check value ranges and cross-field requirements.
    pub fn validate(&self) -> Result<()> {
        fn fail(msg: impl Into<String>) -> Result<()> {
            Err(HarnessError::Config(msg.into()))
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.steps_per_epoch == 0 {
            return fail("steps_per_epoch must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.objective.uses_mmd() && self.batch_size < 2 {
            return fail("the latent divergence estimator needs batch_size >= 2");
        }
        if self.latent == 0 || self.hidden == 0 || self.embedding == 0 || self.head_hidden == 0 {
            return fail("model dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.clusters == 0 {
            return fail("clusters must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr must be positive and finite");
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return fail("clip must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.pretrain_fraction) {
            return fail("pretrain_fraction must lie in [0, 1]");
        }
        if !self.alpha_end.is_finite() || !(self.ramp_epochs.is_finite() && self.ramp_epochs > 0.0)
        {
            return fail("alpha_end must be finite and ramp_epochs positive");
        }
        if self.mi_samples < rnf_core::divergences::MIN_MC_SAMPLES {
            return fail(format!(
                "mi_samples must be at least {}",
                rnf_core::divergences::MIN_MC_SAMPLES
            ));
        }
        if self.synthetic_sentences == 0 && self.data_dir.is_none() {
            return fail("synthetic_sentences must be positive without a data_dir");
        }
        if self.synthetic_dev_sentences == 0 && self.data_dir.is_none() {
            return fail("synthetic_dev_sentences must be positive without a data_dir");
        }
        if self.vocab_cap <= rnf_core::data::RESERVED {
            return fail("vocab_cap must exceed the reserved token ids");
        }
        Ok(())
    }

    /// Effective evaluation batch size.
    pub fn eval_batch(&self) -> usize {
        if self.eval_batch_size == 0 {
            self.batch_size
        } else {
            self.eval_batch_size
        }
    }

    /// Number of leading epochs run under the plain ELBO objective before
    /// clusters are gathered. Zero unless the objective needs clusters and
    /// no artifact was supplied. Never consumes the whole budget.
    pub fn pretrain_epochs(&self) -> usize {
        if self.objective.uses_regularized_logdet() && self.cluster_path.is_none() {
            let raw = (self.epochs as f64 * self.pretrain_fraction).round() as usize;
            raw.min(self.epochs.saturating_sub(1))
        } else {
            0
        }
    }

    /// Model shape implied by this config for a given vocabulary size.
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            embedding: self.embedding,
            hidden: self.hidden,
            latent: self.latent,
            head_hidden: self.head_hidden,
            injection: self.injection,
            dropout: self.dropout,
        }
    }
}

fn non_empty_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl fmt::Display for RunConfig {
    /// Render in the same key=value format the parser accepts.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "objective = {}", self.objective.name())?;
        writeln!(f, "flows = {}", self.flows)?;
        writeln!(f, "clusters = {}", self.clusters)?;
        let kernel = match self.kernel {
            KernelKind::InverseMultiquadratic => "imq",
            KernelKind::Gaussian => "gaussian",
        };
        writeln!(f, "kernel = {kernel}")?;
        writeln!(f, "latent = {}", self.latent)?;
        writeln!(f, "hidden = {}", self.hidden)?;
        writeln!(f, "embedding = {}", self.embedding)?;
        writeln!(f, "head_hidden = {}", self.head_hidden)?;
        let injection = match self.injection {
            Injection::InitState => "init-state",
            Injection::InitStateConcat => "init-state-concat",
        };
        writeln!(f, "injection = {injection}")?;
        writeln!(f, "dropout = {}", self.dropout)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "steps_per_epoch = {}", self.steps_per_epoch)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "eval_batch_size = {}", self.eval_batch_size)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "beta = {}", self.beta)?;
        writeln!(f, "alpha_end = {}", self.alpha_end)?;
        writeln!(f, "ramp_epochs = {}", self.ramp_epochs)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "clip = {}", self.clip)?;
        writeln!(f, "pretrain_fraction = {}", self.pretrain_fraction)?;
        if let Some(p) = &self.cluster_path {
            writeln!(f, "cluster_path = {}", p.display())?;
        }
        if let Some(p) = &self.data_dir {
            writeln!(f, "data_dir = {}", p.display())?;
        }
        writeln!(f, "out_dir = {}", self.out_dir.display())?;
        if let Some(p) = &self.resume {
            writeln!(f, "resume = {}", p.display())?;
        }
        writeln!(f, "synthetic_sentences = {}", self.synthetic_sentences)?;
        writeln!(f, "synthetic_dev_sentences = {}", self.synthetic_dev_sentences)?;
        writeln!(f, "vocab_cap = {}", self.vocab_cap)?;
        writeln!(f, "mi_samples = {}", self.mi_samples)?;
        writeln!(f, "checkpoint_every_steps = {}", self.checkpoint_every_steps)
    }
}
