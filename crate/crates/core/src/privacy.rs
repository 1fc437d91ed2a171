//! Deviation between approximate and true server embeddings, and the
//! isotropic Gaussian-noise baseline used for matched-exposure comparisons.
//!
//! Cosine-to-truth stands in for inversion-attack exposure: no attack model is
//! run here, and every report says so.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::embedding::{cosine_similarity, norm, Diagnostic, EmbeddingSet, LABEL_APPROX};
use crate::error::{Error, Result};
use crate::retrieval::{recall_at_k, search_topk, Metric, Qrels};

pub const PROXY_NOTE: &str = "cosine-to-truth deviation (inversion-exposure proxy)";

/// Allowed gap between the noise baseline's mean cosine and the target.
pub const MATCH_TOLERANCE: f64 = 0.01;
/// Bisection iterations for the sigma search.
pub const SIGMA_SEARCH_ITERATIONS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantiles {
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub quantiles: Quantiles,
    pub tau: f64,
    /// Share of pairs with cosine strictly above `tau`.
    pub fraction_above_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub per_id: Vec<(String, f64)>,
    pub summary: DeviationSummary,
}

impl DeviationReport {
    pub fn to_tsv(&self) -> String {
        let s = &self.summary;
        let q = &s.quantiles;
        let mut out = format!("# {PROXY_NOTE}\n");
        out.push_str("#count\tmean\tstd\tmin\tp05\tp25\tp50\tp75\tp95\tmax\ttau\tfraction_above_tau\n");
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}",
            s.count, s.mean, s.std, s.min, q.p05, q.p25, q.p50, q.p75, q.p95, s.max, s.tau,
            s.fraction_above_tau
        );
        out
    }

    pub fn per_id_tsv(&self) -> String {
        let mut out = String::from("#id\tcosine\n");
        for (id, c) in &self.per_id {
            let _ = writeln!(out, "{id}\t{c:.9}");
        }
        out
    }

    /// JSON document with `per_id`, `summary` and the caller's `config`.
    pub fn to_json(&self, config: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "measure": PROXY_NOTE,
            "per_id": self.per_id.iter().map(|(id, c)| serde_json::json!({"id": id, "cosine": c})).collect::<Vec<_>>(),
            "summary": self.summary,
            "config": config,
        })
    }
}

fn check_matched(approx: &EmbeddingSet, truth: &EmbeddingSet) -> Result<()> {
    if approx.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            context: "approximate vs true embedding dim",
            expected: truth.dim(),
            actual: approx.dim(),
        });
    }
    let mut diags = Vec::new();
    if approx.len() != truth.len() {
        diags.push(Diagnostic::RowCountMismatch {
            local: approx.len(),
            server: truth.len(),
        });
    }
    for (row, (a, t)) in approx.ids().iter().zip(truth.ids()).enumerate() {
        if a != t {
            diags.push(Diagnostic::IdMismatch {
                row,
                local_id: a.clone(),
                server_id: t.clone(),
            });
        }
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidPairs(diags))
    }
}

/// Per-row cosine between matching rows of two id-aligned sets.
pub fn pairwise_cosines(approx: &EmbeddingSet, truth: &EmbeddingSet) -> Result<Vec<f64>> {
    check_matched(approx, truth)?;
    approx
        .rows()
        .zip(truth.rows())
        .enumerate()
        .map(|(i, (a, t))| {
            cosine_similarity(a, t).map_err(|_| {
                Error::Degenerate(format!("zero-norm row for id {:?}", approx.ids()[i]))
            })
        })
        .collect()
}

pub fn mean_cosine(approx: &EmbeddingSet, truth: &EmbeddingSet) -> Result<f64> {
    let mut c = pairwise_cosines(approx, truth)?;
    c.sort_by(f64::total_cmp);
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn deviation_report(
    approx: &EmbeddingSet,
    truth: &EmbeddingSet,
    tau: f64,
) -> Result<DeviationReport> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [-1, 1], got {tau}")));
    }
    let cos = pairwise_cosines(approx, truth)?;
    // Statistics come from the sorted values so they do not depend on row order.
    let mut sorted = cos.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    let above = sorted.iter().filter(|&&c| c > tau).count();
    let summary = DeviationSummary {
        count: sorted.len(),
        mean,
        std: var.sqrt(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        quantiles: Quantiles {
            p05: quantile(&sorted, 0.05),
            p25: quantile(&sorted, 0.25),
            p50: quantile(&sorted, 0.50),
            p75: quantile(&sorted, 0.75),
            p95: quantile(&sorted, 0.95),
        },
        tau,
        fraction_above_tau: above as f64 / n,
    };
    Ok(DeviationReport {
        per_id: approx.ids().iter().cloned().zip(cos).collect(),
        summary,
    })
}

/// Adds i.i.d. `N(0, sigma²)` noise to every coordinate, reproducibly from `seed`.
pub fn add_gaussian_noise(set: &EmbeddingSet, sigma: f64, seed: u64) -> Result<EmbeddingSet> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(set.clone().with_label(LABEL_APPROX));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = set
        .vectors()
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (x as f64 + sigma * z) as f32
        })
        .collect();
    EmbeddingSet::from_raw(set.ids().to_vec(), vectors, set.dim(), LABEL_APPROX)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedRow {
    pub k: usize,
    pub recall_truth: f64,
    pub recall_aligned: f64,
    pub recall_noise: f64,
    /// `recall_aligned − recall_noise`.
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedExposure {
    /// Mean cosine of the aligned queries to their true embeddings.
    pub target_cos: f64,
    pub sigma: f64,
    /// Mean cosine of the noise-perturbed queries to their true embeddings.
    pub achieved_cos: f64,
    pub rows: Vec<MatchedRow>,
}

impl MatchedExposure {
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# matched exposure: target_cos={:.6} achieved_cos={:.6} sigma={:.6e} ({PROXY_NOTE})\n",
            self.target_cos, self.achieved_cos, self.sigma
        );
        out.push_str("#k\trecall_truth\trecall_aligned\trecall_noise\tadvantage\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.k, r.recall_truth, r.recall_aligned, r.recall_noise, r.advantage
            );
        }
        out
    }
}

/// Finds the noise level whose mean cosine-to-truth is closest to `target`,
/// failing unless it lands within [`MATCH_TOLERANCE`]. Returns `(sigma, achieved_cos)`.
///
/// The search always converges on the target; zero noise is returned only
/// when the target is at or above the truth's own mean cosine.
pub fn match_noise_sigma(truth: &EmbeddingSet, target: f64, seed: u64) -> Result<(f64, f64)> {
    let eval = |sigma: f64| -> Result<f64> {
        mean_cosine(&add_gaussian_noise(truth, sigma, seed)?, truth)
    };
    let at_zero = eval(0.0)?;
    let max_norm = truth.rows().map(norm).fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0, 10.0 * max_norm);
    let at_hi = eval(hi)?;
    if target >= at_zero && target - at_zero <= MATCH_TOLERANCE {
        return Ok((0.0, at_zero));
    }
    if target > at_zero || target < at_hi - MATCH_TOLERANCE {
        return Err(Error::UnreachableTarget {
            target,
            low: at_hi,
            high: at_zero,
        });
    }
    let mut best = if (at_hi - target).abs() < (at_zero - target).abs() {
        (hi, at_hi)
    } else {
        (0.0, at_zero)
    };
    for _ in 0..SIGMA_SEARCH_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let c = eval(mid)?;
        if (c - target).abs() < (best.1 - target).abs() {
            best = (mid, c);
        }
        if c > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best.1 - target).abs() > MATCH_TOLERANCE {
        return Err(Error::UnreachableTarget {
            target,
            low: at_hi,
            high: at_zero,
        });
    }
    Ok(best)
}

/// Compares aligned queries against Gaussian-noised true queries tuned to the
/// same mean cosine-to-truth, reporting Recall@k of both (and of the true queries).
pub fn matched_exposure_comparison(
    corpus: &EmbeddingSet,
    truth_queries: &EmbeddingSet,
    aligned_queries: &EmbeddingSet,
    qrels: &Qrels,
    k_list: &[usize],
    seed: u64,
    metric: Metric,
) -> Result<MatchedExposure> {
    let max_k = *k_list
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidArgument("empty k list".into()))?;
    let target_cos = mean_cosine(aligned_queries, truth_queries)?;
    let (sigma, achieved_cos) = match_noise_sigma(truth_queries, target_cos, seed)?;
    let noisy = add_gaussian_noise(truth_queries, sigma, seed)?;

    let run_truth = search_topk(corpus, truth_queries, max_k, metric)?;
    let run_aligned = search_topk(corpus, aligned_queries, max_k, metric)?;
    let run_noise = search_topk(corpus, &noisy, max_k, metric)?;
    let rows = k_list
        .iter()
        .map(|&k| {
            let recall_truth = recall_at_k(&run_truth, qrels, k)?.mean;
            let recall_aligned = recall_at_k(&run_aligned, qrels, k)?.mean;
            let recall_noise = recall_at_k(&run_noise, qrels, k)?.mean;
            Ok(MatchedRow {
                k,
                recall_truth,
                recall_aligned,
                recall_noise,
                advantage: recall_aligned - recall_noise,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchedExposure {
        target_cos,
        sigma,
        achieved_cos,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[(&str, &[f32])]) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows.iter().map(|(id, v)| (*id, v.to_vec())), "t").unwrap()
    }

    fn negate(s: &EmbeddingSet) -> EmbeddingSet {
        let v = s.vectors().iter().map(|x| -x).collect();
        EmbeddingSet::new(s.ids().to_vec(), v, s.dim(), "approx").unwrap()
    }

    fn sample() -> EmbeddingSet {
        set(&[("a", &[1.0, 2.0]), ("b", &[-1.0, 0.5]), ("c", &[3.0, -3.0])])
    }

    #[test]
    fn identical_sets_have_unit_cosine() {
        let s = sample();
        let r = deviation_report(&s, &s, 0.9).unwrap();
        assert!(r.per_id.iter().all(|(_, c)| (c - 1.0).abs() < 1e-12));
        assert!((r.summary.mean - 1.0).abs() < 1e-12);
        assert_eq!(r.summary.fraction_above_tau, 1.0);
    }

    #[test]
    fn negated_sets_have_minus_one() {
        let s = sample();
        let r = deviation_report(&negate(&s), &s, 0.0).unwrap();
        assert!(r.per_id.iter().all(|(_, c)| (c + 1.0).abs() < 1e-12));
        assert_eq!(r.summary.fraction_above_tau, 0.0);
    }

    #[test]
    fn report_errors() {
        let s = sample();
        let swapped = s.select(&[1, 0, 2]).unwrap();
        assert!(matches!(deviation_report(&swapped, &s, 0.5), Err(Error::InvalidPairs(_))));
        let narrow = set(&[("a", &[1.0]), ("b", &[1.0]), ("c", &[1.0])]);
        assert!(deviation_report(&narrow, &s, 0.5).is_err());
        let zero = set(&[("a", &[0.0, 0.0]), ("b", &[1.0, 0.0]), ("c", &[1.0, 0.0])]);
        assert!(matches!(deviation_report(&zero, &s, 0.5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.0);
        assert_eq!(quantile(&v, 0.25), 1.0);
        assert!((quantile(&v, 0.05) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_is_bitwise_identity() {
        let s = set(&[("a", &[-0.0, 1.5]), ("b", &[f32::MIN_POSITIVE, -2.0])]);
        let n = add_gaussian_noise(&s, 0.0, 9).unwrap();
        let bits = |s: &EmbeddingSet| s.vectors().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&n), bits(&s));
        assert_eq!(n.space_label(), LABEL_APPROX);
    }

    #[test]
    fn noise_is_seeded() {
        let s = sample();
        let a = add_gaussian_noise(&s, 0.5, 3).unwrap();
        assert_eq!(a, add_gaussian_noise(&s, 0.5, 3).unwrap());
        assert_ne!(a, add_gaussian_noise(&s, 0.5, 4).unwrap());
        assert!(add_gaussian_noise(&s, -1.0, 3).is_err());
    }

    #[test]
    fn identical_queries_match_at_zero_sigma() {
        let s = sample();
        let (sigma, c) = match_noise_sigma(&s, 1.0, 0).unwrap();
        assert_eq!(sigma, 0.0);
        assert!((c - 1.0).abs() < 1e-12, "{c}");
    }
}
