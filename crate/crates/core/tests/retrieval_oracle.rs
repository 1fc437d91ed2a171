mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use steer_core::retrieval::{compare_runs, recall_at_k, search_topk, Metric, Qrels};
use steer_core::EmbeddingSet;

const METRICS: [Metric; 3] = [Metric::Cosine, Metric::Dot, Metric::Euclidean];

fn random_qrels(r: &mut rand_chacha::ChaCha8Rng, queries: &EmbeddingSet, corpus: &EmbeddingSet) -> Qrels {
    let mut qrels = Qrels::new();
    for q in queries.ids() {
        for _ in 0..r.random_range(1..=6) {
            let d = &corpus.ids()[r.random_range(0..corpus.len())];
            qrels.insert(q.clone(), d.clone());
        }
    }
    qrels
}

#[test]
fn topk_equals_exhaustive_sort_on_50_corpora() {
    let mut r = rng(2024);
    for case in 0..50 {
        let n = r.random_range(1..=1000);
        let dim = r.random_range(1..=24);
        let corpus = gaussian_set(&mut r, n, dim, "d");
        let nq = r.random_range(1..=8);
        let queries = gaussian_set(&mut r, nq, dim, "q");
        let k = r.random_range(1..=n);
        let metric = METRICS[case % 3];
        let run = search_topk(&corpus, &queries, k, metric).unwrap();
        let oracle = brute_force_topk(&corpus, &queries, k, metric);
        for (ranking, want) in run.rankings.iter().zip(&oracle) {
            let got: Vec<&str> = ranking.top_ids(k).collect();
            assert_eq!(got, *want, "case {case}, {metric}, n={n}, k={k}");
        }

        let qrels = random_qrels(&mut r, &queries, &corpus);
        let mut last = 0.0;
        for kk in 1..=k {
            let rec = recall_at_k(&run, &qrels, kk).unwrap().mean;
            assert!(rec + 1e-12 >= last, "case {case}: recall fell at k={kk}");
            last = rec;
        }
    }
}

#[test]
fn exact_ties_break_by_doc_id() {
    // Integer vectors with many exact duplicates.
    let rows = [
        ("c", vec![1.0f32, 0.0]),
        ("a", vec![1.0, 0.0]),
        ("e", vec![0.0, 1.0]),
        ("b", vec![1.0, 0.0]),
        ("d", vec![2.0, 0.0]),
    ];
    let corpus = EmbeddingSet::from_rows(rows, "server").unwrap();
    let queries = EmbeddingSet::from_rows([("q", vec![1.0f32, 0.0])], "approx").unwrap();
    for metric in METRICS {
        for k in 1..=5 {
            let run = search_topk(&corpus, &queries, k, metric).unwrap();
            let want = &brute_force_topk(&corpus, &queries, k, metric)[0];
            let got: Vec<&str> = run.rankings[0].top_ids(k).collect();
            assert_eq!(got, *want, "{metric} k={k}");
        }
    }
    let run = search_topk(&corpus, &queries, 4, Metric::Cosine).unwrap();
    let got: Vec<&str> = run.rankings[0].top_ids(4).collect();
    assert_eq!(got, ["a", "b", "c", "d"]);
}

#[test]
fn self_comparison_has_zero_deltas() {
    let mut r = rng(5);
    let corpus = gaussian_set(&mut r, 200, 6, "d");
    let queries = gaussian_set(&mut r, 10, 6, "q");
    let qrels = random_qrels(&mut r, &queries, &corpus);
    let run = search_topk(&corpus, &queries, 50, Metric::Cosine).unwrap();
    let cmp = compare_runs(&run, &run, &qrels, &[5, 20, 50]).unwrap();
    for row in &cmp.rows {
        assert_eq!(row.delta, 0.0);
        assert_eq!(row.mean_overlap, 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn corpus_order_does_not_change_results(seed in 0u64..10_000, n in 2usize..120, k_frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let corpus = gaussian_set(&mut r, n, 5, "d");
        let queries = gaussian_set(&mut r, 3, 5, "q");
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let permuted = corpus.select(&order).unwrap();
        for metric in METRICS {
            let a = search_topk(&corpus, &queries, k, metric).unwrap();
            let b = search_topk(&permuted, &queries, k, metric).unwrap();
            prop_assert_eq!(&a, &b);
        }
    }

    #[test]
    fn cosine_ignores_query_scale(seed in 0u64..10_000, scale in 0.01f32..100.0) {
        let mut r = rng(seed);
        let corpus = gaussian_set(&mut r, 60, 4, "d");
        let queries = gaussian_set(&mut r, 2, 4, "q");
        let scaled = EmbeddingSet::from_rows(
            queries.ids().iter().cloned().zip(queries.rows().map(|v| v.iter().map(|x| x * scale).collect())),
            "q",
        ).unwrap();
        let a = search_topk(&corpus, &queries, 10, Metric::Cosine).unwrap();
        let b = search_topk(&corpus, &scaled, 10, Metric::Cosine).unwrap();
        for (x, y) in a.rankings.iter().zip(&b.rankings) {
            // Near-ties may legitimately reorder after rescaling; compare the sets of
            // clearly separated prefixes instead of the raw lists.
            let sx: Vec<f64> = x.hits.iter().map(|h| h.score).collect();
            for (i, w) in sx.windows(2).enumerate() {
                if w[0] - w[1] > 1e-6 {
                    let px: std::collections::BTreeSet<&str> = x.top_ids(i + 1).collect();
                    let py: std::collections::BTreeSet<&str> = y.top_ids(i + 1).collect();
                    prop_assert_eq!(px, py);
                }
            }
        }
    }
}
