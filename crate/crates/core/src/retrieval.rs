//! Exact top-k search over a server-space corpus and Recall@k evaluation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, squared_distance, EmbeddingSet};
use crate::error::{Error, Result};

/// The Recall@k grid reported by default.
pub const DEFAULT_K_GRID: [usize; 6] = [5, 20, 50, 100, 200, 300];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Dot,
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Dot => "dot",
            Metric::Euclidean => "euclidean",
        }
    }

    /// Whether a larger score ranks first.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Euclidean)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "dot" => Ok(Metric::Dot),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// Relevance judgments: query id to the set of relevant doc ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a relevant document; returns false if it was already present.
    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>) -> bool {
        self.map.entry(query.into()).or_default().insert(doc.into())
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.map.get(query)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.map.iter()
    }

    pub fn judgment_count(&self) -> usize {
        self.map.values().map(|s| s.len()).sum()
    }
}

impl<Q: Into<String>, D: Into<String>> FromIterator<(Q, D)> for Qrels {
    fn from_iter<I: IntoIterator<Item = (Q, D)>>(iter: I) -> Self {
        let mut q = Qrels::new();
        for (query, doc) in iter {
            q.insert(query, doc);
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

/// Ranked results for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl Ranking {
    pub fn top_ids(&self, k: usize) -> impl Iterator<Item = &str> {
        self.hits.iter().take(k).map(|h| h.doc_id.as_str())
    }
}

/// Top-k lists for a batch of queries, in query order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub metric: Metric,
    pub k: usize,
    pub rankings: Vec<Ranking>,
}

impl RetrievalRun {
    pub fn ranking(&self, query_id: &str) -> Option<&Ranking> {
        self.rankings.iter().find(|r| r.query_id == query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.rankings.iter().map(|r| r.query_id.as_str())
    }
}

/// Exhaustive top-k under `metric`. Ties are broken by the lexicographically
/// smaller doc id, so results do not depend on corpus row order.
pub fn search_topk(
    corpus: &EmbeddingSet,
    queries: &EmbeddingSet,
    k: usize,
    metric: Metric,
) -> Result<RetrievalRun> {
    if corpus.dim() != queries.dim() {
        return Err(Error::DimensionMismatch {
            context: "corpus dim vs query dim",
            expected: corpus.dim(),
            actual: queries.dim(),
        });
    }
    if k == 0 || k > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "k must lie in [1, {}], got {k}",
            corpus.len()
        )));
    }
    let doc_norms: Vec<f64> = corpus.rows().map(norm).collect();
    if metric == Metric::Cosine {
        if let Some(i) = doc_norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Degenerate(format!(
                "zero-norm corpus vector {:?} under cosine",
                corpus.ids()[i]
            )));
        }
    }
    let ids = corpus.ids();
    let rankings = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let q_norm = norm(q);
            if metric == Metric::Cosine && q_norm == 0.0 {
                return Err(Error::Degenerate(format!(
                    "zero-norm query vector {:?} under cosine",
                    queries.ids()[qi]
                )));
            }
            let mut scored: Vec<(f64, usize)> = corpus
                .rows()
                .enumerate()
                .map(|(di, d)| {
                    let s = match metric {
                        Metric::Cosine => dot(q, d) / (q_norm * doc_norms[di]),
                        Metric::Dot => dot(q, d),
                        Metric::Euclidean => squared_distance(q, d).sqrt(),
                    };
                    (s, di)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
                let by_score = if metric.higher_is_better() {
                    b.0.total_cmp(&a.0)
                } else {
                    a.0.total_cmp(&b.0)
                };
                by_score.then_with(|| ids[a.1].cmp(&ids[b.1]))
            };
            if k < scored.len() {
                scored.select_nth_unstable_by(k - 1, cmp);
                scored.truncate(k);
            }
            scored.sort_unstable_by(cmp);
            Ok(Ranking {
                query_id: queries.ids()[qi].clone(),
                hits: scored
                    .into_iter()
                    .map(|(score, di)| Hit {
                        doc_id: ids[di].clone(),
                        score,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalRun {
        metric,
        k,
        rankings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub k: usize,
    /// Mean over evaluated queries; 0 when none could be evaluated.
    pub mean: f64,
    pub per_query: Vec<(String, f64)>,
    /// Run queries with no relevance judgments, excluded from the mean.
    pub missing: Vec<String>,
}

impl RecallReport {
    pub fn evaluated(&self) -> usize {
        self.per_query.len()
    }
}

pub fn recall_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<RecallReport> {
    if k == 0 || k > run.k {
        return Err(Error::InvalidArgument(format!(
            "recall cutoff {k} outside [1, {}] of the run",
            run.k
        )));
    }
    let mut per_query = Vec::with_capacity(run.rankings.len());
    let mut missing = Vec::new();
    for r in &run.rankings {
        match qrels.relevant(&r.query_id) {
            Some(rel) if !rel.is_empty() => {
                let found = r.top_ids(k).filter(|d| rel.contains(*d)).count();
                per_query.push((r.query_id.clone(), found as f64 / rel.len() as f64));
            }
            _ => missing.push(r.query_id.clone()),
        }
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
    };
    Ok(RecallReport {
        k,
        mean,
        per_query,
        missing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub k: usize,
    pub recall_a: f64,
    pub recall_b: f64,
    /// `recall_b − recall_a`.
    pub delta: f64,
    pub mean_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunComparison {
    pub rows: Vec<ComparisonRow>,
    /// Per query, the Jaccard overlap of the two top-k sets at each k of `rows`.
    pub overlaps: Vec<(String, Vec<f64>)>,
    pub missing: Vec<String>,
}

pub fn jaccard<'a>(a: impl Iterator<Item = &'a str>, b: impl Iterator<Item = &'a str>) -> f64 {
    let a: HashSet<&str> = a.collect();
    let b: HashSet<&str> = b.collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Paired Recall@k of two runs over the same queries, with per-query top-k overlap.
pub fn compare_runs(
    run_a: &RetrievalRun,
    run_b: &RetrievalRun,
    qrels: &Qrels,
    k_list: &[usize],
) -> Result<RunComparison> {
    let ids_a: BTreeSet<&str> = run_a.query_ids().collect();
    let ids_b: BTreeSet<&str> = run_b.query_ids().collect();
    if ids_a != ids_b {
        let diff: Vec<&str> = ids_a.symmetric_difference(&ids_b).take(5).copied().collect();
        return Err(Error::QueryMismatch(format!(
            "queries present in only one run: {diff:?}"
        )));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    let mut missing = Vec::new();
    for &k in k_list {
        let ra = recall_at_k(run_a, qrels, k)?;
        let rb = recall_at_k(run_b, qrels, k)?;
        missing = ra.missing;
        rows.push(ComparisonRow {
            k,
            recall_a: ra.mean,
            recall_b: rb.mean,
            delta: rb.mean - ra.mean,
            mean_overlap: 0.0,
        });
    }
    let mut overlaps = Vec::with_capacity(run_a.rankings.len());
    for ra in &run_a.rankings {
        let rb = run_b.ranking(&ra.query_id).expect("query sets checked equal");
        let per_k: Vec<f64> = k_list
            .iter()
            .map(|&k| jaccard(ra.top_ids(k), rb.top_ids(k)))
            .collect();
        overlaps.push((ra.query_id.clone(), per_k));
    }
    let n = overlaps.len().max(1) as f64;
    for (col, row) in rows.iter_mut().enumerate() {
        row.mean_overlap = overlaps.iter().map(|(_, o)| o[col]).sum::<f64>() / n;
    }
    Ok(RunComparison {
        rows,
        overlaps,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[(&str, &[f32])]) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows.iter().map(|(id, v)| (*id, v.to_vec())), "t").unwrap()
    }

    fn run_from(lists: &[(&str, &[&str])], k: usize) -> RetrievalRun {
        RetrievalRun {
            metric: Metric::Cosine,
            k,
            rankings: lists
                .iter()
                .map(|(q, docs)| Ranking {
                    query_id: q.to_string(),
                    hits: docs
                        .iter()
                        .enumerate()
                        .map(|(i, d)| Hit {
                            doc_id: d.to_string(),
                            score: -(i as f64),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn nearest_by_cosine() {
        let corpus = set(&[("d1", &[1.0, 0.0]), ("d2", &[0.0, 1.0])]);
        let q = set(&[("q", &[1.0, 0.1])]);
        let run = search_topk(&corpus, &q, 1, Metric::Cosine).unwrap();
        assert_eq!(run.rankings[0].hits[0].doc_id, "d1");
    }

    #[test]
    fn self_match_scores_one() {
        let corpus = set(&[("a", &[0.3, -2.0, 1.0]), ("b", &[1.0, 1.0, 1.0])]);
        let q = set(&[("q", &[1.0, 1.0, 1.0])]);
        let run = search_topk(&corpus, &q, 1, Metric::Cosine).unwrap();
        assert_eq!(run.rankings[0].hits[0].doc_id, "b");
        assert!((run.rankings[0].hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let corpus = set(&[("z", &[1.0, 0.0]), ("a", &[2.0, 0.0]), ("m", &[0.0, 1.0])]);
        let q = set(&[("q", &[1.0, 0.0])]);
        let run = search_topk(&corpus, &q, 2, Metric::Cosine).unwrap();
        let ids: Vec<&str> = run.rankings[0].top_ids(2).collect();
        assert_eq!(ids, ["a", "z"]);
    }

    #[test]
    fn euclidean_ranks_ascending() {
        let corpus = set(&[("far", &[10.0, 0.0]), ("near", &[1.0, 0.0])]);
        let q = set(&[("q", &[0.0, 0.0])]);
        let run = search_topk(&corpus, &q, 2, Metric::Euclidean).unwrap();
        assert_eq!(run.rankings[0].hits[0].doc_id, "near");
        assert_eq!(run.rankings[0].hits[0].score, 1.0);
    }

    #[test]
    fn search_errors() {
        let corpus = set(&[("d1", &[1.0, 0.0])]);
        assert!(search_topk(&corpus, &set(&[("q", &[1.0])]), 1, Metric::Dot).is_err());
        assert!(search_topk(&corpus, &set(&[("q", &[1.0, 0.0])]), 2, Metric::Dot).is_err());
        assert!(search_topk(&corpus, &set(&[("q", &[1.0, 0.0])]), 0, Metric::Dot).is_err());
        let zero = set(&[("q", &[0.0, 0.0])]);
        assert!(matches!(
            search_topk(&corpus, &zero, 1, Metric::Cosine),
            Err(Error::Degenerate(_))
        ));
        assert!(search_topk(&corpus, &zero, 1, Metric::Dot).is_ok());
    }

    #[test]
    fn recall_examples() {
        let qrels: Qrels = [("q1", "a"), ("q1", "b"), ("q2", "c")].into_iter().collect();
        let perfect = run_from(&[("q1", &["a", "b", "x"]), ("q2", &["c", "y", "z"])], 3);
        assert_eq!(recall_at_k(&perfect, &qrels, 2).unwrap().mean, 1.0);

        let none = run_from(&[("q1", &["x", "y"]), ("q2", &["y", "z"])], 2);
        assert_eq!(recall_at_k(&none, &qrels, 2).unwrap().mean, 0.0);

        let qrels: Qrels = [("q1", "a"), ("q2", "b"), ("q3", "c")].into_iter().collect();
        let two = run_from(&[("q1", &["a", "x"]), ("q2", &["x", "b"]), ("q3", &["x", "y"])], 2);
        assert!((recall_at_k(&two, &qrels, 2).unwrap().mean - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn recall_reports_missing_queries() {
        let qrels: Qrels = [("q1", "a")].into_iter().collect();
        let run = run_from(&[("q1", &["a"]), ("q9", &["a"])], 1);
        let r = recall_at_k(&run, &qrels, 1).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.evaluated(), 1);
        assert_eq!(r.missing, vec!["q9".to_string()]);
        assert!(recall_at_k(&run, &qrels, 2).is_err());
    }

    #[test]
    fn self_comparison_is_neutral() {
        let qrels: Qrels = [("q1", "a"), ("q2", "c")].into_iter().collect();
        let run = run_from(&[("q1", &["a", "b", "x"]), ("q2", &["y", "c", "z"])], 3);
        let cmp = compare_runs(&run, &run, &qrels, &[1, 2, 3]).unwrap();
        assert_eq!(cmp.rows.len(), 3);
        for row in &cmp.rows {
            assert_eq!(row.delta, 0.0);
            assert_eq!(row.mean_overlap, 1.0);
        }
    }

    #[test]
    fn comparison_requires_same_queries() {
        let qrels = Qrels::new();
        let a = run_from(&[("q1", &["a"])], 1);
        let b = run_from(&[("q2", &["a"])], 1);
        assert!(matches!(
            compare_runs(&a, &b, &qrels, &[1]),
            Err(Error::QueryMismatch(_))
        ));
    }

    #[test]
    fn jaccard_values() {
        assert_eq!(jaccard(["a", "b"].into_iter(), ["b", "c"].into_iter()), 1.0 / 3.0);
        assert_eq!(jaccard(["a"].into_iter(), ["a"].into_iter()), 1.0);
    }
}
