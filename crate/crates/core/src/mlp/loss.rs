//! Composite alignment loss: MSE + α·cosine distance + β·Smooth-L1 + γ·similarity penalty.
//!
//! The similarity penalty is a hinge `max(cos − τ, 0)` that discourages the
//! mapped embedding from matching its target too closely.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network, Real};
use crate::error::{Error, Result};

/// Every hyperparameter of an MLP training run. All fields are written into
/// saved model metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the cosine-distance term.
    pub alpha: f64,
    /// Weight of the Smooth-L1 term.
    pub beta: f64,
    /// Weight of the similarity penalty.
    pub gamma: f64,
    /// Cosine threshold above which the penalty activates.
    pub tau: f64,
    pub huber_delta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            gamma: 0.1,
            tau: 0.9,
            huber_delta: 1.0,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 256,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Only the MSE term active.
    pub fn mse_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [-1, 1], got {}", self.tau));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return bad(format!("huber_delta must be > 0, got {}", self.huber_delta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Value of each loss component over one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub cos_dist: f64,
    pub huber: f64,
    pub sim_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.mse, self.cos_dist, self.huber, self.sim_penalty, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub(crate) fn scaled_add(&mut self, other: &LossBreakdown, weight: f64) {
        self.mse += weight * other.mse;
        self.cos_dist += weight * other.cos_dist;
        self.huber += weight * other.huber;
        self.sim_penalty += weight * other.sim_penalty;
        self.total += weight * other.total;
    }
}

/// Smooth-L1 with threshold `delta`: quadratic `0.5 r²/δ` inside, linear `|r| − δ/2` outside.
pub fn smooth_l1(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a < delta {
        0.5 * r * r / delta
    } else {
        a - 0.5 * delta
    }
}

fn smooth_l1_grad(r: f64, delta: f64) -> f64 {
    if r.abs() < delta {
        r / delta
    } else {
        r.signum()
    }
}

/// Evaluates the loss on `pred` vs `target` and, if requested, its gradient
/// with respect to `pred`.
pub fn loss_on_outputs<F: Real>(
    pred: ArrayView2<F>,
    target: ArrayView2<F>,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Array2<F>>)> {
    if pred.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            context: "prediction vs target shape",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    let (m, q) = pred.dim();
    if m == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mf = m as f64;
    let coord_scale = 1.0 / (mf * q as f64);
    let mut grad = want_grad.then(|| Array2::<F>::zeros((m, q)));

    let (mut sq_sum, mut cos_sum, mut huber_sum, mut sim_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut p = vec![0.0f64; q];
    let mut t = vec![0.0f64; q];
    for i in 0..m {
        for j in 0..q {
            p[j] = pred[(i, j)].to_f64();
            t[j] = target[(i, j)].to_f64();
        }
        let (mut pp, mut tt, mut pt) = (0.0, 0.0, 0.0);
        for j in 0..q {
            let r = p[j] - t[j];
            sq_sum += r * r;
            huber_sum += smooth_l1(r, cfg.huber_delta);
            pp += p[j] * p[j];
            tt += t[j] * t[j];
            pt += p[j] * t[j];
        }
        if pp == 0.0 || tt == 0.0 {
            let which = if pp == 0.0 { "prediction" } else { "target" };
            return Err(Error::Degenerate(format!(
                "zero-norm {which} row {i} in cosine loss"
            )));
        }
        let (np, nt) = (pp.sqrt(), tt.sqrt());
        let raw_cos = pt / (np * nt);
        let cos = raw_cos.clamp(-1.0, 1.0);
        cos_sum += 1.0 - cos;
        let penalized = cos > cfg.tau;
        if penalized {
            sim_sum += cos - cfg.tau;
        }

        if let Some(g) = grad.as_mut() {
            // d cos / d p = t / (|p||t|) − cos · p / |p|²
            let cos_weight = (-cfg.alpha + if penalized { cfg.gamma } else { 0.0 }) / mf;
            for j in 0..q {
                let r = p[j] - t[j];
                let dcos = t[j] / (np * nt) - raw_cos * p[j] / pp;
                let v = 2.0 / mf * r
                    + cos_weight * dcos
                    + cfg.beta * coord_scale * smooth_l1_grad(r, cfg.huber_delta);
                g[(i, j)] = F::from_f64(v);
            }
        }
    }

    let mse = sq_sum / mf;
    let cos_dist = cos_sum / mf;
    let huber = huber_sum * coord_scale;
    let sim_penalty = sim_sum / mf;
    let total = mse + cfg.alpha * cos_dist + cfg.beta * huber + cfg.gamma * sim_penalty;
    Ok((
        LossBreakdown {
            mse,
            cos_dist,
            huber,
            sim_penalty,
            total,
        },
        grad,
    ))
}

pub fn network_loss<F: Real>(
    net: &Network<F>,
    local: ArrayView2<F>,
    server: ArrayView2<F>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    check_rows(&local, &server)?;
    let pred = net.forward(local)?;
    check_output(net, &server)?;
    Ok(loss_on_outputs(pred.view(), server, cfg, false)?.0)
}

pub fn network_loss_and_gradient<F: Real>(
    net: &Network<F>,
    local: ArrayView2<F>,
    server: ArrayView2<F>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients<F>)> {
    check_rows(&local, &server)?;
    check_output(net, &server)?;
    let trace = net.forward_trace(local)?;
    let (lb, d_out) = loss_on_outputs(trace.output.view(), server, cfg, true)?;
    let grads = net.backward(&trace, d_out.expect("gradient requested"));
    Ok((lb, grads))
}

fn check_rows<F>(local: &ArrayView2<F>, server: &ArrayView2<F>) -> Result<()> {
    if local.nrows() != server.nrows() {
        return Err(Error::DimensionMismatch {
            context: "local vs server batch rows",
            expected: local.nrows(),
            actual: server.nrows(),
        });
    }
    Ok(())
}

fn check_output<F: Real>(net: &Network<F>, server: &ArrayView2<F>) -> Result<()> {
    if server.ncols() != net.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "server batch columns vs network output width",
            expected: net.output_dim(),
            actual: server.ncols(),
        });
    }
    Ok(())
}
