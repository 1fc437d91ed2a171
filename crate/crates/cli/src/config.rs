use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use steer_core::retrieval::DEFAULT_K_GRID;
use steer_core::{Metric, TrainConfig};

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Settings shared by the commands; loaded from `--config` and then
/// overridden field by field with flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub ridge_lambda: f64,
    pub metric: Metric,
    /// L2-normalize local vectors before fitting and applying a map.
    pub normalize: bool,
    /// Hidden widths for `mlp-custom`.
    pub hidden: Vec<usize>,
    pub k: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            ridge_lambda: DEFAULT_RIDGE,
            metric: Metric::Cosine,
            normalize: false,
            hidden: Vec::new(),
            k: DEFAULT_K_GRID.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub ridge_lambda: Option<f64>,
    #[arg(long)]
    pub normalize: Option<bool>,
    /// Comma-separated hidden widths for mlp-custom.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub huber_delta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shuffle: Option<bool>,
}

pub fn load(path: &Path) -> Result<CliConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn invalid(msg: String) -> anyhow::Error {
    steer_core::Error::InvalidArgument(msg).into()
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<CliConfig> {
        let mut c = match &self.config {
            Some(p) => load(p)?,
            None => CliConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            ridge_lambda => ridge_lambda,
            normalize => normalize,
            hidden => hidden,
            alpha => train.alpha,
            beta => train.beta,
            gamma => train.gamma,
            tau => train.tau,
            huber_delta => train.huber_delta,
            lr => train.learning_rate,
            adam_beta1 => train.adam_beta1,
            adam_beta2 => train.adam_beta2,
            adam_eps => train.adam_eps,
            epochs => train.epochs,
            batch_size => train.batch_size,
            seed => train.seed,
            shuffle => train.shuffle,
        );
        if !(c.ridge_lambda >= 0.0 && c.ridge_lambda.is_finite()) {
            return Err(invalid(format!("ridge_lambda must be >= 0, got {}", c.ridge_lambda)));
        }
        c.train.validate()?;
        Ok(c)
    }
}
