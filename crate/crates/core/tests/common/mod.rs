//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use steer_core::io::ModelFile;
use steer_core::mlp::{network_loss, network_loss_and_gradient, Network, TrainConfig};
use steer_core::{AlignmentModel, AlignmentPairs, EmbeddingSet, LinearMap, Metric, MlpModel, Preset};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_set(r: &mut ChaCha8Rng, n: usize, dim: usize, prefix: &str) -> EmbeddingSet {
    let vectors = (0..n * dim)
        .map(|_| StandardNormal.sample(r))
        .map(|v: f64| v as f32)
        .collect();
    let ids = (0..n).map(|i| format!("{prefix}{i:05}")).collect();
    EmbeddingSet::new(ids, vectors, dim, "test").unwrap()
}

pub fn to_dmatrix(set: &EmbeddingSet) -> DMatrix<f64> {
    DMatrix::from_row_iterator(set.len(), set.dim(), set.vectors().iter().map(|&v| v as f64))
}

pub fn map_to_dmatrix(map: &LinearMap) -> DMatrix<f64> {
    DMatrix::from_row_iterator(
        map.source_dim(),
        map.target_dim(),
        map.matrix().iter().map(|&v| v as f64),
    )
}

/// Minimum-norm least squares `pinv(E_L) · E_S` through an SVD.
pub fn pinv_solution(pairs: &AlignmentPairs) -> DMatrix<f64> {
    let x = to_dmatrix(&pairs.local);
    let y = to_dmatrix(&pairs.server);
    let pinv = x.pseudo_inverse(1e-12).expect("svd converges");
    pinv * y
}

/// Ridge solution from the normal equations `(XᵀX + λI) A = XᵀY`.
pub fn ridge_solution(pairs: &AlignmentPairs, lambda: f64) -> DMatrix<f64> {
    let x = to_dmatrix(&pairs.local);
    let y = to_dmatrix(&pairs.server);
    let p = x.ncols();
    let gram = x.transpose() * &x + DMatrix::identity(p, p) * lambda;
    gram.cholesky().expect("positive definite").solve(&(x.transpose() * y))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `(‖E_Lᵀ(E_L A − E_S)‖_max, ‖E_LᵀE_S‖_max)`.
pub fn residual_orthogonality(pairs: &AlignmentPairs, map: &LinearMap) -> (f64, f64) {
    let x = to_dmatrix(&pairs.local);
    let y = to_dmatrix(&pairs.server);
    let a = map_to_dmatrix(map);
    let lhs = x.transpose() * (&x * a - &y);
    let scale = x.transpose() * y;
    (max_abs(&lhs), max_abs(&scale))
}

/// Scores every document and fully sorts, best first, ties by doc id.
pub fn brute_force_topk(
    corpus: &EmbeddingSet,
    queries: &EmbeddingSet,
    k: usize,
    metric: Metric,
) -> Vec<Vec<String>> {
    let dotp = |a: &[f32], b: &[f32]| -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] as f64 * b[i] as f64;
        }
        s
    };
    queries
        .rows()
        .map(|q| {
            let mut all: Vec<(f64, &String)> = corpus
                .rows()
                .zip(corpus.ids())
                .map(|(d, id)| {
                    let s = match metric {
                        Metric::Dot => dotp(q, d),
                        Metric::Cosine => dotp(q, d) / (dotp(q, q).sqrt() * dotp(d, d).sqrt()),
                        Metric::Euclidean => {
                            let mut s = 0.0;
                            for i in 0..q.len() {
                                let diff = q[i] as f64 - d[i] as f64;
                                s += diff * diff;
                            }
                            -s.sqrt()
                        }
                    };
                    (s, id)
                })
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            all.into_iter().take(k).map(|(_, id)| id.clone()).collect()
        })
        .collect()
}

/// Outcome of a central-difference check of the full loss gradient.
#[derive(Debug)]
pub struct GradCheck {
    pub params: usize,
    pub checked: usize,
    /// Coordinates where a ReLU or the hinge switched inside `±h`.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub terms: [f64; 4],
}

pub const FD_STEP: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-6;

fn activation_pattern(net: &Network<f64>, x: &ndarray::Array2<f64>, y: &ndarray::Array2<f64>, tau: f64) -> Vec<bool> {
    let trace = net.forward_trace(x.view()).unwrap();
    let mut pattern: Vec<bool> = trace.inputs[1..]
        .iter()
        .flat_map(|a| a.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect();
    for (p, t) in trace.output.rows().into_iter().zip(y.rows()) {
        let pt = p.dot(&t);
        let cos = pt / (p.dot(&p).sqrt() * t.dot(&t).sqrt());
        pattern.push(cos > tau);
    }
    pattern
}

/// Builds a random small network and batch with every loss term active and
/// compares the analytic gradient with central differences in f64.
pub fn gradient_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let depth = r.random_range(1..=3);
    let mut dims = vec![r.random_range(3..=7)];
    for _ in 0..depth {
        dims.push(r.random_range(4..=12));
    }
    dims.push(r.random_range(3..=7));
    let net32 = Network::<f32>::kaiming(&dims, seed).unwrap();
    let mut net: Network<f64> = net32.cast();
    for l in net.layers_mut() {
        l.bias.mapv_inplace(|_| r.random_range(-0.3..0.3));
    }
    let m = 8;
    let x = ndarray::Array2::from_shape_fn((m, dims[0]), |_| StandardNormal.sample(&mut r));
    let out = *dims.last().unwrap();
    let pred = net.forward(x.view()).unwrap();
    // Targets correlated with the predictions so that cosines spread over a
    // wide range; the hinge threshold then splits the rows.
    let y = ndarray::Array2::from_shape_fn((m, out), |(i, j)| {
        let w = if i % 2 == 0 { 1.0 } else { 0.2 };
        let z: f64 = StandardNormal.sample(&mut r);
        w * pred[(i, j)] + z * 0.5
    });
    let mut cos: Vec<f64> = pred
        .rows()
        .into_iter()
        .zip(y.rows())
        .map(|(p, t)| p.dot(&t) / (p.dot(&p).sqrt() * t.dot(&t).sqrt()))
        .collect();
    cos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut resid: Vec<f64> = (&pred - &y).iter().map(|v| v.abs()).collect();
    resid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cfg = TrainConfig {
        alpha: 0.5,
        beta: 0.3,
        gamma: 0.7,
        tau: 0.5 * (cos[m / 2 - 1] + cos[m / 2]),
        huber_delta: resid[resid.len() / 2],
        ..TrainConfig::default()
    };

    let (lb, grads) = network_loss_and_gradient(&net, x.view(), y.view(), &cfg).unwrap();
    let analytic: Vec<f64> = grads.flatten();
    let base = net.flatten();
    let at = |params: &[f64]| Network::<f64>::from_flat(&dims, params).unwrap();
    let mut check = GradCheck {
        params: base.len(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        terms: [lb.mse, lb.cos_dist, lb.huber, lb.sim_penalty],
    };
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + FD_STEP;
        let plus = at(&work);
        work[i] = base[i] - FD_STEP;
        let minus = at(&work);
        work[i] = base[i];
        if activation_pattern(&plus, &x, &y, cfg.tau) != activation_pattern(&minus, &x, &y, cfg.tau) {
            check.skipped += 1;
            continue;
        }
        let lp = network_loss(&plus, x.view(), y.view(), &cfg).unwrap().total;
        let lm = network_loss(&minus, x.view(), y.view(), &cfg).unwrap().total;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        check.max_rel_error = check.max_rel_error.max(rel);
        check.checked += 1;
    }
    check
}

/// Straightforward per-row MLP evaluation with explicit loops.
pub fn naive_forward(net: &Network<f32>, x: &[f32]) -> Vec<f64> {
    let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let n = net.layers().len();
    for (li, layer) in net.layers().iter().enumerate() {
        let (inp, out) = layer.weights.dim();
        let mut z = vec![0.0f64; out];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = layer.bias[j] as f64;
            for i in 0..inp {
                s += h[i] * layer.weights[(i, j)] as f64;
            }
            *zj = if li + 1 < n { s.max(0.0) } else { s };
        }
        h = z;
    }
    h
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Values drawn from the full bit range, including subnormals, ±0 and huge numbers.
pub fn random_finite(r: &mut impl Rng) -> f32 {
    loop {
        let v = f32::from_bits(r.random());
        if v.is_finite() {
            return v;
        }
    }
}

pub fn random_set(r: &mut impl Rng) -> EmbeddingSet {
    let n = r.random_range(1..40);
    let dim = r.random_range(1..20);
    let ids = (0..n)
        .map(|i| match i % 3 {
            0 => format!("doc-{i}"),
            1 => format!("ünï {i}\tx"),
            _ => format!("{}", r.random::<u64>()),
        })
        .collect();
    let v = (0..n * dim).map(|_| random_finite(r)).collect();
    EmbeddingSet::new(ids, v, dim, "file").unwrap()
}

pub fn random_model(r: &mut impl Rng, seed: u64) -> ModelFile {
    let config = serde_json::json!({"seed": seed, "note": "round trip"});
    if r.random_bool(0.5) {
        let (p, q) = (r.random_range(1..9), r.random_range(1..9));
        let m = (0..p * q).map(|_| random_finite(r)).collect();
        ModelFile {
            model: LinearMap::new(m, p, q, r.random_range(0.0..1.0)).unwrap().into(),
            normalize_input: r.random(),
            config,
        }
    } else {
        let mut dims = vec![r.random_range(1..6)];
        for _ in 0..r.random_range(0..3) {
            dims.push(r.random_range(1..9));
        }
        dims.push(r.random_range(1..6));
        let params: Vec<f32> = (0..steer_core::mlp::param_count(&dims))
            .map(|_| random_finite(r))
            .collect();
        let net = Network::from_flat(&dims, &params).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let preset = if dims.len() == 3 { Preset::Small } else { Preset::Custom };
        ModelFile {
            model: MlpModel::new(net, preset, Some(cfg)).unwrap().into(),
            normalize_input: r.random(),
            config,
        }
    }
}

pub fn model_params(m: &AlignmentModel) -> Vec<f32> {
    match m {
        AlignmentModel::Linear(l) => l.matrix().to_vec(),
        AlignmentModel::Mlp(n) => n.network().flatten(),
    }
}
