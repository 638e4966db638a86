//! Run configuration: one JSON object whose keys mirror the training
//! configuration, plus paths and evaluation settings. Unknown keys are
//! rejected and every key has a default.

use std::path::{Path, PathBuf};

use fisherlda_core::evalrank::Metric;
use fisherlda_core::trainer::{ChannelSpec, LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Lda,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub name: String,
    /// Half-open column range of the raw descriptors.
    pub columns: [usize; 2],
    pub pca_dim: usize,
    pub components: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_all_params: bool,
    pub lr_halving_period_epochs: usize,
    pub epochs: usize,
    pub lambda_reg: f64,
    pub epsilon_offset: f64,
    pub gmm_update_period_epochs: usize,
    pub line_search_grid: Vec<f64>,
    pub gamma_threshold: f64,
    pub subsample_fraction: f64,
    pub loss_kind: LossName,
    pub seed: u64,
    pub min_per_class: usize,
    pub batches_per_epoch: Option<usize>,
    pub gmm_sample_batches: usize,
    pub hidden_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub batch_norm: bool,
    pub channels: Vec<ChannelConfig>,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub fit_sample_limit: usize,
    pub early_stop: bool,

    /// Image manifest; defaults to `<out_dir>/data/manifest.json`, where
    /// `synth` writes its dataset.
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub trials: usize,
    pub metric: MetricName,
    pub threads: Option<usize>,
    pub synth_identities: usize,
    pub synth_per_identity: usize,
    pub synth_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            lr_init: t.lr_init,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            decay_all_params: t.decay_all_params,
            lr_halving_period_epochs: t.lr_halving_period_epochs,
            epochs: t.epochs,
            lambda_reg: t.lambda_reg,
            epsilon_offset: t.epsilon_offset,
            gmm_update_period_epochs: t.gmm_update_period_epochs,
            line_search_grid: t.line_search_grid,
            gamma_threshold: t.gamma_threshold,
            subsample_fraction: t.subsample_fraction,
            loss_kind: LossName::Lda,
            seed: t.seed,
            min_per_class: t.min_per_class,
            batches_per_epoch: t.batches_per_epoch,
            gmm_sample_batches: t.gmm_sample_batches,
            hidden_widths: t.hidden_widths,
            dropout_rate: t.dropout_rate,
            batch_norm: t.batch_norm,
            channels: t
                .channels
                .into_iter()
                .map(|c| ChannelConfig {
                    name: c.name,
                    columns: [c.columns.0, c.columns.1],
                    pca_dim: c.pca_dim,
                    components: c.components,
                })
                .collect(),
            em_max_iters: t.em_max_iters,
            em_tol: t.em_tol,
            fit_sample_limit: t.fit_sample_limit,
            early_stop: t.early_stop,
            manifest: None,
            out_dir: PathBuf::from("out"),
            trials: 10,
            metric: MetricName::Euclidean,
            threads: None,
            synth_identities: 8,
            synth_per_identity: 12,
            synth_dim: 128,
        }
    }
}

impl RunConfig {
    /// Parses JSON; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, path: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::format(path, e.to_string()))?;
        cfg.out_dir = base_dir.join(&cfg.out_dir);
        cfg.manifest = cfg.manifest.map(|m| base_dir.join(m));
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| CliError::format(path, "config is not valid UTF-8"))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let cfg = Self::parse(text, base, path)?;
        Ok((cfg, bytes))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.synth_dir().join("manifest.json"))
    }

    /// Where `synth` writes its manifest and descriptor files.
    pub fn synth_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn metric(&self) -> Metric {
        match self.metric {
            MetricName::Euclidean => Metric::Euclidean,
            MetricName::Cosine => Metric::Cosine,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr_init: self.lr_init,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_all_params: self.decay_all_params,
            lr_halving_period_epochs: self.lr_halving_period_epochs,
            epochs: self.epochs,
            lambda_reg: self.lambda_reg,
            epsilon_offset: self.epsilon_offset,
            gmm_update_period_epochs: self.gmm_update_period_epochs,
            line_search_grid: self.line_search_grid.clone(),
            gamma_threshold: self.gamma_threshold,
            subsample_fraction: self.subsample_fraction,
            loss_kind: match self.loss_kind {
                LossName::Lda => LossKind::Lda,
                LossName::CrossEntropy => LossKind::CrossEntropy,
            },
            seed: self.seed,
            min_per_class: self.min_per_class,
            batches_per_epoch: self.batches_per_epoch,
            gmm_sample_batches: self.gmm_sample_batches,
            hidden_widths: self.hidden_widths.clone(),
            dropout_rate: self.dropout_rate,
            batch_norm: self.batch_norm,
            channels: self
                .channels
                .iter()
                .map(|c| ChannelSpec {
                    name: c.name.clone(),
                    columns: (c.columns[0], c.columns[1]),
                    pca_dim: c.pca_dim,
                    components: c.components,
                })
                .collect(),
            em_max_iters: self.em_max_iters,
            em_tol: self.em_tol,
            fit_sample_limit: self.fit_sample_limit,
            early_stop: self.early_stop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.trials == 0 {
            return Err(CliError::Config("trials must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}
