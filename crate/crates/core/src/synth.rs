//! Seeded synthetic embedding spaces with a known ground-truth map.
//!
//! Local vectors are standard Gaussian. Server vectors are the ground-truth
//! transform of the local vectors plus optional Gaussian noise. Retrieval tasks
//! plant each query's relevant documents as small perturbations of its true
//! server embedding, so ground-truth retrieval is perfect by construction and
//! any recall loss comes from the alignment.
//!
//! Each kind of draw uses its own ChaCha stream, so changing one part of a
//! spec (say, corpus size) leaves the other draws untouched.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{norm, AlignmentPairs, EmbeddingSet, LABEL_LOCAL, LABEL_SERVER};
use crate::error::{Error, Result};
use crate::linear::LinearMap;
use crate::retrieval::Qrels;

/// Planted-document perturbation norm, relative to the mean corpus vector norm.
pub const PLANT_RELATIVE_NORM: f64 = 0.05;

mod stream {
    pub const MAP: u64 = 0;
    pub const PAIRS: u64 = 1;
    pub const QUERIES: u64 = 2;
    pub const BACKGROUND: u64 = 3;
    pub const PLANTED: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    /// Isometry (orthonormal rows when p ≤ q, orthonormal columns otherwise).
    LinearOrthogonal,
    /// Gaussian entries scaled by `1/√p`.
    LinearRandom,
    /// `(1 − s)·xA + s·tanh(xA)` with the `LinearRandom` matrix `A`.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Number of alignment pairs.
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub map_kind: MapKind,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub nonlinearity_strength: f64,
    #[serde(default)]
    pub seed: u64,
    pub corpus_size: usize,
    pub query_count: usize,
    #[serde(default = "one")]
    pub relevant_per_query: usize,
}

fn one() -> usize {
    1
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [
            ("m", self.m),
            ("p", self.p),
            ("q", self.q),
            ("corpus_size", self.corpus_size),
            ("query_count", self.query_count),
            ("relevant_per_query", self.relevant_per_query),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.nonlinearity_strength) {
            return bad(format!(
                "nonlinearity_strength must lie in [0, 1], got {}",
                self.nonlinearity_strength
            ));
        }
        if self.query_count * self.relevant_per_query > self.corpus_size {
            return bad(format!(
                "corpus_size {} cannot hold {} queries x {} planted documents",
                self.corpus_size, self.query_count, self.relevant_per_query
            ));
        }
        Ok(())
    }
}

/// The transform that produced the server space, saved for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub map_kind: MapKind,
    pub nonlinearity_strength: f64,
    pub map: LinearMap,
}

impl GroundTruth {
    pub fn is_linear(&self) -> bool {
        self.map_kind != MapKind::Nonlinear
    }

    pub fn apply_row(&self, x: &[f32], out: &mut [f32]) {
        self.map.map_row(x, out);
        if self.map_kind == MapKind::Nonlinear {
            let s = self.nonlinearity_strength;
            for v in out.iter_mut() {
                let z = *v as f64;
                *v = ((1.0 - s) * z + s * z.tanh()) as f32;
            }
        }
    }

    pub fn apply(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.map.source_dim() {
            return Err(Error::DimensionMismatch {
                context: "input dim vs ground-truth source dim",
                expected: self.map.source_dim(),
                actual: set.dim(),
            });
        }
        let q = self.map.target_dim();
        let mut out = vec![0.0f32; set.len() * q];
        for (x, dst) in set.rows().zip(out.chunks_exact_mut(q)) {
            self.apply_row(x, dst);
        }
        EmbeddingSet::from_raw(set.ids().to_vec(), out, q, LABEL_SERVER)
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_set(rng: &mut ChaCha8Rng, ids: Vec<String>, dim: usize, label: &str) -> EmbeddingSet {
    let vectors = (0..ids.len() * dim).map(|_| gaussian(rng) as f32).collect();
    EmbeddingSet::from_raw(ids, vectors, dim, label).expect("shape by construction")
}

fn add_noise(set: EmbeddingSet, sigma: f64, rng: &mut ChaCha8Rng) -> EmbeddingSet {
    if sigma == 0.0 {
        return set;
    }
    let (ids, mut v, dim, label) = set.into_parts();
    for x in &mut v {
        *x = (*x as f64 + sigma * gaussian(rng)) as f32;
    }
    EmbeddingSet::from_raw(ids, v, dim, label).expect("shape unchanged")
}

/// Orthonormalizes the rows of a row-major `r x c` matrix with `r ≤ c`
/// by modified Gram-Schmidt.
fn orthonormal_rows(a: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..i {
            let proj: f64 = (0..c).map(|k| a[i * c + k] * a[j * c + k]).sum();
            for k in 0..c {
                a[i * c + k] -= proj * a[j * c + k];
            }
        }
        let n = (0..c).map(|k| a[i * c + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            a[i * c + k] /= n;
        }
    }
}

pub fn ground_truth(spec: &SynthSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let (p, q) = (spec.p, spec.q);
    let mut r = rng(spec.seed, stream::MAP);
    let mut a: Vec<f64> = (0..p * q).map(|_| gaussian(&mut r)).collect();
    match spec.map_kind {
        MapKind::LinearOrthogonal if p <= q => orthonormal_rows(&mut a, p, q),
        MapKind::LinearOrthogonal => {
            // Orthonormal columns: orthonormalize the rows of the transpose.
            let mut t: Vec<f64> = (0..q * p).map(|i| a[(i % p) * q + i / p]).collect();
            orthonormal_rows(&mut t, q, p);
            for i in 0..p {
                for j in 0..q {
                    a[i * q + j] = t[j * p + i];
                }
            }
        }
        MapKind::LinearRandom | MapKind::Nonlinear => {
            let scale = 1.0 / (p as f64).sqrt();
            a.iter_mut().for_each(|v| *v *= scale);
        }
    }
    let map = LinearMap::new(a.into_iter().map(|v| v as f32).collect(), p, q, 0.0)?;
    Ok(GroundTruth {
        map_kind: spec.map_kind,
        nonlinearity_strength: if spec.map_kind == MapKind::Nonlinear {
            spec.nonlinearity_strength
        } else {
            0.0
        },
        map,
    })
}

pub struct SynthPairs {
    pub pairs: AlignmentPairs,
    pub truth: GroundTruth,
}

pub fn generate_pairs(spec: &SynthSpec) -> Result<SynthPairs> {
    let truth = ground_truth(spec)?;
    let mut r = rng(spec.seed, stream::PAIRS);
    let ids = (0..spec.m).map(|i| format!("x{i:06}")).collect();
    let local = gaussian_set(&mut r, ids, spec.p, LABEL_LOCAL);
    let server = add_noise(truth.apply(&local)?, spec.noise_sigma, &mut r);
    Ok(SynthPairs {
        pairs: AlignmentPairs::new(local, server),
        truth,
    })
}

pub struct SynthTask {
    /// Server-space documents, planted and background, in shuffled order.
    pub corpus: EmbeddingSet,
    pub queries_local: EmbeddingSet,
    /// The queries' true server-space embeddings.
    pub queries_server: EmbeddingSet,
    pub qrels: Qrels,
    pub truth: GroundTruth,
}

pub fn generate_retrieval_task(spec: &SynthSpec) -> Result<SynthTask> {
    let truth = ground_truth(spec)?;
    let (p, q) = (spec.p, spec.q);

    let mut r = rng(spec.seed, stream::QUERIES);
    let qids: Vec<String> = (0..spec.query_count).map(|i| format!("q{i:05}")).collect();
    let queries_local = gaussian_set(&mut r, qids.clone(), p, LABEL_LOCAL);
    let queries_server = add_noise(truth.apply(&queries_local)?, spec.noise_sigma, &mut r);

    let planted = spec.query_count * spec.relevant_per_query;
    let n_background = spec.corpus_size - planted;
    let mut r = rng(spec.seed, stream::BACKGROUND);
    let background = if n_background > 0 {
        let ids = (0..n_background).map(|i| i.to_string()).collect();
        let local = gaussian_set(&mut r, ids, p, LABEL_LOCAL);
        Some(add_noise(truth.apply(&local)?, spec.noise_sigma, &mut r))
    } else {
        None
    };
    let reference = background.as_ref().unwrap_or(&queries_server);
    let mean_norm = reference.rows().map(norm).sum::<f64>() / reference.len() as f64;
    let plant_sigma = PLANT_RELATIVE_NORM * mean_norm / (q as f64).sqrt();

    // (owner query, vector) for every document before shuffling.
    let mut docs: Vec<(Option<usize>, Vec<f32>)> = Vec::with_capacity(spec.corpus_size);
    let mut r = rng(spec.seed, stream::PLANTED);
    for (qi, t) in queries_server.rows().enumerate() {
        for _ in 0..spec.relevant_per_query {
            let v = t
                .iter()
                .map(|&x| (x as f64 + plant_sigma * gaussian(&mut r)) as f32)
                .collect();
            docs.push((Some(qi), v));
        }
    }
    if let Some(bg) = &background {
        docs.extend(bg.rows().map(|v| (None, v.to_vec())));
    }
    docs.shuffle(&mut rng(spec.seed, stream::SHUFFLE));

    let mut qrels = Qrels::new();
    let mut ids = Vec::with_capacity(docs.len());
    let mut vectors = Vec::with_capacity(docs.len() * q);
    for (i, (owner, v)) in docs.into_iter().enumerate() {
        let id = format!("d{i:06}");
        if let Some(qi) = owner {
            qrels.insert(qids[qi].clone(), id.clone());
        }
        ids.push(id);
        vectors.extend(v);
    }
    let corpus = EmbeddingSet::from_raw(ids, vectors, q, LABEL_SERVER)?;
    Ok(SynthTask {
        corpus,
        queries_local,
        queries_server,
        qrels,
        truth,
    })
}
