//! Nonlinear alignment with a ReLU multilayer perceptron.

mod loss;
mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use loss::{
    loss_on_outputs, network_loss, network_loss_and_gradient, smooth_l1, LossBreakdown,
    TrainConfig,
};
pub use network::{param_count, Dense, Gradients, Network, Real, Trace};
pub use train::{train_mlp, train_mlp_with, Adam, TrainingHistory};

use crate::embedding::{AlignmentPairs, EmbeddingSet, LABEL_APPROX};
use crate::error::{Error, Result};

/// Named capacity presets. Hidden widths are fixed per preset; `Custom` takes
/// its widths from the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Medium,
    Base,
    Custom,
}

impl Preset {
    pub fn hidden_widths(self) -> &'static [usize] {
        match self {
            Preset::Small => &[1024],
            Preset::Medium => &[2048],
            Preset::Base => &[4096, 4096],
            Preset::Custom => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Base => "base",
            Preset::Custom => "custom",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            "base" => Ok(Preset::Base),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }
}

/// Network shape to train: a preset, or explicit hidden widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    Preset(Preset),
    /// Hidden widths only; empty means a single linear layer.
    Custom(Vec<usize>),
}

impl Architecture {
    pub fn preset(&self) -> Preset {
        match self {
            Architecture::Preset(p) => *p,
            Architecture::Custom(_) => Preset::Custom,
        }
    }

    pub fn layer_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let hidden: &[usize] = match self {
            Architecture::Preset(p) => p.hidden_widths(),
            Architecture::Custom(h) => h,
        };
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        dims
    }
}

/// A trained (or hand-built) alignment network with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    network: Network<f32>,
    preset: Preset,
    config: Option<TrainConfig>,
}

impl MlpModel {
    pub fn new(network: Network<f32>, preset: Preset, config: Option<TrainConfig>) -> Result<Self> {
        if !network.is_finite() {
            return Err(Error::Degenerate("MLP parameters contain non-finite values".into()));
        }
        Ok(Self {
            network,
            preset,
            config,
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn preset(&self) -> Preset {
        self.preset
    }

    pub fn config(&self) -> Option<&TrainConfig> {
        self.config.as_ref()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.network.layer_dims()
    }

    pub fn source_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn target_dim(&self) -> usize {
        self.network.output_dim()
    }
}

pub fn mlp_forward(model: &MlpModel, batch: ArrayView2<f32>) -> Result<Array2<f32>> {
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite input to MLP forward pass".into()));
    }
    model.network.forward(batch)
}

pub fn loss(
    model: &MlpModel,
    batch_local: ArrayView2<f32>,
    batch_server: ArrayView2<f32>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    network_loss(&model.network, batch_local, batch_server, cfg)
}

pub fn loss_gradient(
    model: &MlpModel,
    batch_local: ArrayView2<f32>,
    batch_server: ArrayView2<f32>,
    cfg: &TrainConfig,
) -> Result<Gradients<f32>> {
    Ok(network_loss_and_gradient(&model.network, batch_local, batch_server, cfg)?.1)
}

pub fn apply_mlp(model: &MlpModel, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != model.source_dim() {
        return Err(Error::DimensionMismatch {
            context: "input set dim vs MLP input width",
            expected: model.source_dim(),
            actual: set.dim(),
        });
    }
    let out = mlp_forward(model, set.view())?;
    EmbeddingSet::from_array(set.ids().to_vec(), out, LABEL_APPROX)
}

/// Mean squared error of `model` on `pairs` (per-row squared norm, averaged over rows).
pub fn pair_mse(model: &MlpModel, pairs: &AlignmentPairs) -> Result<f64> {
    let pred = apply_mlp(model, &pairs.local)?;
    Ok(crate::embedding::mean_squared_row_error(&pred, &pairs.server))
}
