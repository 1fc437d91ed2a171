//! Dense feed-forward network with ReLU on hidden layers and a linear output.
//!
//! Generic over the float type so that the `f32` production path and the `f64`
//! path used for finite-difference checks run through identical code.

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub trait Real: LinalgScalar + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `in x out`, so a batch maps as `X · W + b`.
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    layers: Vec<Dense<F>>,
}

/// Per-layer inputs recorded by a forward pass, needed for backprop.
pub struct Trace<F> {
    /// `inputs[l]` is the input to layer `l` (post-ReLU for `l > 0`).
    pub inputs: Vec<Array2<F>>,
    pub output: Array2<F>,
}

/// Parameter-shaped gradients (same layout as the network's layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn flatten(&self) -> Vec<F> {
        flatten_layers(&self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten()
            .into_iter()
            .map(|g| g.to_f64().abs())
            .fold(0.0, f64::max)
    }
}

fn flatten_layers<F: Real>(layers: &[Dense<F>]) -> Vec<F> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter().copied());
        out.extend(l.bias.iter().copied());
    }
    out
}

pub fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(
            "layer dims need at least an input and an output width".into(),
        ));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths must be positive: {dims:?}"
        )));
    }
    Ok(())
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<F: Real> Network<F> {
    pub fn from_layers(layers: Vec<Dense<F>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::DimensionMismatch {
                    context: "bias length vs layer output width",
                    expected: l.out_dim(),
                    actual: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::DimensionMismatch {
                    context: "consecutive layer widths",
                    expected: layers[i - 1].out_dim(),
                    actual: l.in_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Fills a network from a flat parameter list in layer order
    /// (each layer: weights row-major, then bias).
    pub fn from_flat(dims: &[usize], params: &[F]) -> Result<Self> {
        check_dims(dims)?;
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "flat parameter count",
                expected,
                actual: params.len(),
            });
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (i, o) = (w[0], w[1]);
            let weights = Array2::from_shape_vec((i, o), params[offset..offset + i * o].to_vec())
                .expect("length checked");
            offset += i * o;
            let bias = Array1::from(params[offset..offset + o].to_vec());
            offset += o;
            layers.push(Dense { weights, bias });
        }
        Self::from_layers(layers)
    }

    /// Kaiming-uniform weights (ReLU gain on hidden layers, unit gain on the
    /// output layer) and zero biases, drawn from a seeded ChaCha stream.
    pub fn kaiming(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let gain2 = if l == last { 1.0 } else { 2.0 };
                let bound = (3.0 * gain2 / w[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weights =
                    Array2::from_shape_simple_fn((w[0], w[1]), || F::from_f64(dist.sample(&mut rng)));
                Dense {
                    weights,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<F>] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.layer_dims())
    }

    pub fn flatten(&self) -> Vec<F> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().chain(l.bias.iter()).all(|v| v.to_f64().is_finite())
        })
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: l.weights.mapv(|v| G::from_f64(v.to_f64())),
                    bias: l.bias.mapv(|v| G::from_f64(v.to_f64())),
                })
                .collect(),
        }
    }

    fn check_input(&self, batch: &ArrayView2<F>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "batch columns vs network input width",
                expected: self.input_dim(),
                actual: batch.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, batch: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_input(&batch)?;
        let mut act = affine(&self.layers[0], batch);
        for layer in &self.layers[1..] {
            relu_in_place(&mut act);
            act = affine(layer, act.view());
        }
        Ok(act)
    }

    pub fn forward_trace(&self, batch: ArrayView2<F>) -> Result<Trace<F>> {
        self.check_input(&batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(batch.to_owned());
        let last = self.layers.len() - 1;
        let mut output = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, inputs[l].view());
            if l == last {
                output = Some(z);
            } else {
                relu_in_place(&mut z);
                inputs.push(z);
            }
        }
        Ok(Trace {
            inputs,
            output: output.expect("at least one layer"),
        })
    }

    /// Backpropagates `d_output` (gradient of a scalar w.r.t. the batch output)
    /// through a recorded trace.
    pub fn backward(&self, trace: &Trace<F>, d_output: Array2<F>) -> Gradients<F> {
        let mut grads: Vec<Dense<F>> = Vec::with_capacity(self.layers.len());
        let mut delta = d_output;
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            let d_weights = input.t().dot(&delta);
            let d_bias = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut d_input = delta.dot(&self.layers[l].weights.t());
                // ReLU'(z) is 1 exactly where the recorded activation is positive.
                ndarray::Zip::from(&mut d_input).and(input).for_each(|d, &a| {
                    if !(a > F::zero()) {
                        *d = F::zero();
                    }
                });
                delta = d_input;
            }
            grads.push(Dense {
                weights: d_weights,
                bias: d_bias,
            });
        }
        grads.reverse();
        Gradients { layers: grads }
    }
}

fn affine<F: Real>(layer: &Dense<F>, input: ArrayView2<F>) -> Array2<F> {
    let mut z = input.dot(&layer.weights);
    for mut row in z.rows_mut() {
        row.zip_mut_with(&layer.bias, |a, &b| *a = *a + b);
    }
    z
}

fn relu_in_place<F: Real>(a: &mut Array2<F>) {
    a.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}
