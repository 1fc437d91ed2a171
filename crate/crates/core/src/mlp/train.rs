use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{network_loss_and_gradient, LossBreakdown, TrainConfig};
use super::network::{Dense, Gradients, Network};
use super::{Architecture, MlpModel};
use crate::embedding::{AlignmentPairs, EmbeddingSet};
use crate::error::{Error, Result};

/// ChaCha stream used for minibatch shuffling; stream 0 seeds initialization.
const SHUFFLE_STREAM: u64 = 1;

/// Adam with bias correction, state kept per parameter tensor.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Dense<f32>>,
    second: Vec<Dense<f32>>,
}

impl Adam {
    pub fn new(net: &Network<f32>, cfg: &TrainConfig) -> Self {
        let zeros = |net: &Network<f32>| -> Vec<Dense<f32>> {
            net.layers()
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.dim()),
                    bias: ndarray::Array1::zeros(l.bias.len()),
                })
                .collect()
        };
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            first: zeros(net),
            second: zeros(net),
        }
    }

    pub fn step(&mut self, net: &mut Network<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(self.step)) as f32;
        let c2 = (1.0 - self.beta2.powi(self.step)) as f32;
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        let update = |w: &mut f32, g: f32, m: &mut f32, v: &mut f32| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|w, &g, m, v| update(w, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|w, &g, m, v| update(w, g, m, v));
        }
    }
}

/// Per-epoch loss trajectory of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<LossBreakdown>,
}

impl TrainingHistory {
    pub fn last(&self) -> Option<&LossBreakdown> {
        self.epochs.last()
    }

    /// Tab-separated log: `epoch mse cos_dist huber sim_penalty total`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("#epoch\tmse\tcos_dist\thuber\tsim_penalty\ttotal\n");
        for (e, lb) in self.epochs.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
                e + 1,
                lb.mse,
                lb.cos_dist,
                lb.huber,
                lb.sim_penalty,
                lb.total
            );
        }
        out
    }

    /// Moving average of the total loss over `window` epochs.
    pub fn smoothed_totals(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.epochs.iter().map(|l| l.total).collect();
        totals
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

pub fn train_mlp(
    pairs: &AlignmentPairs,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainingHistory)> {
    train_mlp_with(pairs, arch, cfg, |_, _| {})
}

/// Trains with minibatch Adam, calling `on_epoch(epoch, loss)` after each epoch, counting from 1.
///
/// The run is a pure function of its inputs: initialization and shuffling use
/// separate seeded ChaCha streams and every reduction has a fixed order.
pub fn train_mlp_with(
    pairs: &AlignmentPairs,
    arch: &Architecture,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<(MlpModel, TrainingHistory)> {
    pairs.ensure_valid()?;
    cfg.validate()?;
    let dims = arch.layer_dims(pairs.local.dim(), pairs.server.dim());
    let mut net = Network::<f32>::kaiming(&dims, cfg.seed)?;
    let mut adam = Adam::new(&net, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let m = pairs.len();
    let mut order: Vec<usize> = (0..m).collect();
    let mut history = TrainingHistory::default();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = LossBreakdown::default();
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |reason: String| Error::TrainingDiverged {
                epoch: epoch + 1,
                batch: batch + 1,
                reason,
            };
            let x = gather(&pairs.local, idx);
            let t = gather(&pairs.server, idx);
            let (lb, grads) = match network_loss_and_gradient(&net, x.view(), t.view(), cfg) {
                Ok(r) => r,
                Err(Error::Degenerate(msg)) => return Err(diverged(msg)),
                Err(e) => return Err(e),
            };
            if !lb.is_finite() {
                return Err(diverged(format!("non-finite loss {}", lb.total)));
            }
            adam.step(&mut net, &grads);
            if !net.is_finite() {
                return Err(diverged("non-finite parameters after update".into()));
            }
            epoch_loss.scaled_add(&lb, idx.len() as f64 / m as f64);
        }
        on_epoch(epoch + 1, &epoch_loss);
        history.epochs.push(epoch_loss);
    }
    let model = MlpModel::new(net, arch.preset(), Some(cfg.clone()))?;
    Ok((model, history))
}

fn gather(set: &EmbeddingSet, idx: &[usize]) -> Array2<f32> {
    let d = set.dim();
    let mut out = Array2::zeros((idx.len(), d));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(idx) {
        dst.as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(set.row(i));
    }
    out
}
