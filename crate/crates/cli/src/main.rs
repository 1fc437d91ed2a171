mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use steer_core::embedding::{l2_normalize, validate_pairs, LABEL_APPROX};
use steer_core::io::{self, ModelFile};
use steer_core::mlp::train_mlp_with;
use steer_core::privacy::{deviation_report, matched_exposure_comparison, PROXY_NOTE};
use steer_core::retrieval::{compare_runs, DEFAULT_K_GRID};
use steer_core::synth::{generate_pairs, generate_retrieval_task, SynthSpec};
use steer_core::{
    fit_linear, recall_at_k, search_topk, AlignmentPairs, Architecture, EmbeddingSet, Error,
    Metric, Preset,
};

use crate::config::{invalid, ConfigArgs, CliConfig};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "steer", version, about = "Align embedding spaces and evaluate private retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Linear,
    MlpSmall,
    MlpMedium,
    MlpBase,
    MlpCustom,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a map from local to server space on paired embeddings.
    Align {
        #[arg(long)]
        pairs_local: PathBuf,
        #[arg(long)]
        pairs_server: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Apply a saved map to an embedding file.
    Transform {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact top-k search of queries against a corpus.
    Search {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "cosine")]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Generate a synthetic pair set and retrieval task.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Add seeded isotropic Gaussian noise to an embedding file.
    Noise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a whitespace-separated text matrix into an embedding file.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        /// Optional file with one id per line; defaults to row numbers.
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Recall@k of a run, optionally against a second run.
    Recall {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_GRID)]
        k: Vec<usize>,
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Cosine deviation between approximate and true embeddings.
    Privacy {
        #[arg(long)]
        approx: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        /// Write the full JSON report here.
        #[arg(long)]
        out_json: Option<PathBuf>,
        /// Write per-id cosines here.
        #[arg(long)]
        per_id: Option<PathBuf>,
    },
    /// Aligned queries versus noise matched to the same mean cosine-to-truth.
    Matched {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries_true: PathBuf,
        #[arg(long)]
        queries_aligned: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_GRID)]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "cosine")]
        metric: Metric,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("STEER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| invalid(format!("STEER_THREADS must be a non-negative integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Align {
            pairs_local,
            pairs_server,
            method,
            out,
            cfg,
        } => align(&pairs_local, &pairs_server, method, &out, &cfg.resolve()?),
        Command::Transform { model, input, out } => transform(&model, &input, &out),
        Command::Search {
            corpus,
            queries,
            k,
            metric,
            out,
        } => {
            let corpus = io::read_emb(&corpus)?;
            let queries = io::read_emb(&queries)?;
            let run = search_topk(&corpus, &queries, k, metric)?;
            io::write_run(&out, &run)?;
            Ok(())
        }
        Command::Eval(e) => eval(e),
        Command::Synth { spec, out_dir } => synth(&spec, &out_dir),
        Command::Noise {
            input,
            sigma,
            seed,
            out,
        } => {
            let set = io::read_emb(&input)?;
            let noisy = steer_core::privacy::add_gaussian_noise(&set, sigma, seed)?;
            write_emb_with_meta(&out, &noisy, json!({"source": input, "sigma": sigma, "seed": seed}))
        }
        Command::Convert { input, ids, out } => {
            let ids = match ids {
                Some(p) => Some(
                    std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?
                        .lines()
                        .map(str::to_string)
                        .collect(),
                ),
                None => None,
            };
            let set = io::read_text_matrix(&input, ids)?;
            write_emb_with_meta(&out, &set, json!({"source": input}))
        }
    }
}

/// Writes `<path>.meta.json` next to an embedding file, recording its label
/// and the settings that produced it.
fn write_emb_with_meta(path: &Path, set: &EmbeddingSet, config: Value) -> Result<()> {
    io::write_emb(path, set)?;
    let meta = json!({
        "space_label": set.space_label(),
        "dim": set.dim(),
        "count": set.len(),
        "config": config,
    });
    let mut meta_path = path.as_os_str().to_owned();
    meta_path.push(".meta.json");
    io::write_atomic(Path::new(&meta_path), pretty(&meta)?.as_bytes())?;
    Ok(())
}

fn pretty(v: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn read_pairs(local: &Path, server: &Path) -> Result<AlignmentPairs> {
    let pairs = AlignmentPairs::new(io::read_emb(local)?, io::read_emb(server)?);
    let diags = validate_pairs(&pairs);
    if !diags.is_empty() {
        return Err(Error::InvalidPairs(diags).into());
    }
    Ok(pairs)
}

fn align(local: &Path, server: &Path, method: Method, out: &Path, cfg: &CliConfig) -> Result<()> {
    let mut pairs = read_pairs(local, server)?;
    if cfg.normalize {
        pairs.local = l2_normalize(&pairs.local)?;
    }
    let method_name = method
        .to_possible_value()
        .map(|v| v.get_name().to_string())
        .unwrap_or_default();
    let effective = json!({
        "method": method_name,
        "pairs_local": local,
        "pairs_server": server,
        "settings": cfg,
    });
    let mut log = format!("# config: {}\n", serde_json::to_string(&effective)?);
    let model = match method {
        Method::Linear => {
            let fit = fit_linear(&pairs, cfg.ridge_lambda)?;
            for w in &fit.warnings {
                eprintln!("warning: {w}");
                log.push_str(&format!("# warning: {w}\n"));
            }
            let mse = steer_core::embedding::mean_squared_row_error(
                &steer_core::apply_linear(&fit.map, &pairs.local)?,
                &pairs.server,
            );
            log.push_str(&format!("#pairs\tmse\n{}\t{mse}\n", pairs.len()));
            fit.map.into()
        }
        _ => {
            let arch = match method {
                Method::MlpSmall => Architecture::Preset(Preset::Small),
                Method::MlpMedium => Architecture::Preset(Preset::Medium),
                Method::MlpBase => Architecture::Preset(Preset::Base),
                _ => Architecture::Custom(cfg.hidden.clone()),
            };
            let (model, history) = train_mlp_with(&pairs, &arch, &cfg.train, |epoch, l| {
                eprintln!("epoch {epoch:>4}  total {:.6}  mse {:.6}", l.total, l.mse);
            })?;
            log.push_str(&history.to_tsv());
            model.into()
        }
    };
    let file = ModelFile {
        model,
        normalize_input: cfg.normalize,
        config: effective,
    };
    io::write_model(out, &file)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log.tsv");
    io::write_atomic(Path::new(&log_path), log.as_bytes())?;
    Ok(())
}

fn transform(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let file = io::read_model(model)?;
    let mut set = io::read_emb(input)?;
    if file.normalize_input {
        set = l2_normalize(&set)?;
    }
    let approx = file.model.apply(&set)?;
    debug_assert_eq!(approx.space_label(), LABEL_APPROX);
    write_emb_with_meta(
        out,
        &approx,
        json!({"model": model, "input": input, "normalize_input": file.normalize_input, "model_config": file.config}),
    )
}

fn read_qrels(path: &Path) -> Result<steer_core::Qrels> {
    let load = io::read_qrels(path)?;
    if load.dropped_nonpositive > 0 || load.duplicates > 0 {
        eprintln!(
            "note: {}: dropped {} judgments with relevance <= 0, {} duplicates",
            path.display(),
            load.dropped_nonpositive,
            load.duplicates
        );
    }
    Ok(load.qrels)
}

fn report_missing(missing: &[String]) {
    if !missing.is_empty() {
        eprintln!("note: {} queries have no judgments and are excluded", missing.len());
    }
}

fn eval(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Recall {
            run,
            qrels,
            k,
            compare,
        } => {
            let qrels = read_qrels(&qrels)?;
            let run_a = io::read_run(&run)?;
            match compare {
                None => {
                    println!("#k\trecall");
                    let mut missing = Vec::new();
                    for &k in &k {
                        let r = recall_at_k(&run_a, &qrels, k)?;
                        println!("{k}\t{:.6}", r.mean);
                        missing = r.missing;
                    }
                    report_missing(&missing);
                }
                Some(other) => {
                    let run_b = io::read_run(&other)?;
                    let cmp = compare_runs(&run_a, &run_b, &qrels, &k)?;
                    println!("#k\trecall_a\trecall_b\tdelta\tmean_overlap");
                    for r in &cmp.rows {
                        println!(
                            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                            r.k, r.recall_a, r.recall_b, r.delta, r.mean_overlap
                        );
                    }
                    report_missing(&cmp.missing);
                }
            }
            Ok(())
        }
        EvalCommand::Privacy {
            approx,
            truth,
            tau,
            out_json,
            per_id,
        } => {
            let a = io::read_emb(&approx)?;
            let t = io::read_emb(&truth)?;
            let report = deviation_report(&a, &t, tau)?;
            print!("{}", report.to_tsv());
            if let Some(p) = out_json {
                let cfg = json!({"approx": approx, "truth": truth, "tau": tau});
                io::write_atomic(&p, pretty(&report.to_json(cfg))?.as_bytes())?;
            }
            if let Some(p) = per_id {
                io::write_atomic(&p, report.per_id_tsv().as_bytes())?;
            }
            Ok(())
        }
        EvalCommand::Matched {
            corpus,
            queries_true,
            queries_aligned,
            qrels,
            k,
            seed,
            metric,
            out_json,
        } => {
            let c = io::read_emb(&corpus)?;
            let t = io::read_emb(&queries_true)?;
            let a = io::read_emb(&queries_aligned)?;
            let qrels = read_qrels(&qrels)?;
            let m = matched_exposure_comparison(&c, &t, &a, &qrels, &k, seed, metric)?;
            print!("{}", m.to_tsv());
            if let Some(p) = out_json {
                let v = json!({
                    "measure": PROXY_NOTE,
                    "result": m,
                    "config": {
                        "corpus": corpus,
                        "queries_true": queries_true,
                        "queries_aligned": queries_aligned,
                        "k": k,
                        "seed": seed,
                        "metric": metric,
                    },
                });
                io::write_atomic(&p, pretty(&v)?.as_bytes())?;
            }
            Ok(())
        }
    }
}

fn synth(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("{}: {e}", spec_path.display())))?;
    spec.validate()?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let pairs = generate_pairs(&spec)?;
    let task = generate_retrieval_task(&spec)?;
    let cfg = serde_json::to_value(&spec)?;
    let p = |name: &str| out_dir.join(name);
    write_emb_with_meta(&p("pairs_local.emb"), &pairs.pairs.local, cfg.clone())?;
    write_emb_with_meta(&p("pairs_server.emb"), &pairs.pairs.server, cfg.clone())?;
    write_emb_with_meta(&p("corpus.emb"), &task.corpus, cfg.clone())?;
    write_emb_with_meta(&p("queries_local.emb"), &task.queries_local, cfg.clone())?;
    write_emb_with_meta(&p("queries_server.emb"), &task.queries_server, cfg.clone())?;
    io::write_qrels(&p("qrels.tsv"), &task.qrels)?;
    io::write_atomic(&p("truth.json"), pretty(&serde_json::to_value(&task.truth)?)?.as_bytes())?;
    io::write_atomic(&p("spec.json"), pretty(&cfg)?.as_bytes())?;
    Ok(())
}
