//! On-disk formats: embedding files, model files, qrels and run TSVs.
//!
//! # Embedding file
//!
//! All integers little-endian, no padding:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 8    | magic `STEERV1\0`                      |
//! | 8      | 4    | version, `u32` (= 1)                   |
//! | 12     | 4    | dim, `u32`                             |
//! | 16     | 8    | count, `u64`                           |
//! | 24     | …    | `count * dim` `f32` values, row-major  |
//!
//! Ids live in a UTF-8 sidecar with the same basename and an `.ids` extension,
//! one id per line, in row order.
//!
//! # Model file
//!
//! One line of compact JSON (the header, terminated by `\n`) followed by the
//! raw parameters as little-endian `f32`. Linear maps store the `p x q` matrix
//! row-major; MLPs store each layer's weights (`in x out`, row-major) then its
//! bias, in layer order.
//!
//! Every write goes to a temporary file in the destination directory and is
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, FormatError, Result};
use crate::linear::LinearMap;
use crate::mlp::{param_count, MlpModel, Network, Preset, TrainConfig};
use crate::model::AlignmentModel;
use crate::retrieval::{Hit, Metric, Qrels, Ranking, RetrievalRun};

pub const EMB_MAGIC: &[u8; 8] = b"STEERV1\0";
pub const EMB_VERSION: u32 = 1;
pub const EMB_HEADER_LEN: usize = 24;
pub const MODEL_FORMAT: &str = "steer-model";
pub const MODEL_VERSION: u32 = 1;

/// Label given to sets read from disk; the binary format carries no label.
pub const LABEL_FILE: &str = "file";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn encode_emb(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + set.vectors().len() * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for v in set.vectors() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes the matrix file at `path` and its `.ids` sidecar.
pub fn write_emb(path: &Path, set: &EmbeddingSet) -> Result<()> {
    if u32::try_from(set.dim()).is_err() {
        return Err(Error::InvalidArgument(format!("dim {} exceeds u32", set.dim())));
    }
    let mut ids = String::new();
    for id in set.ids() {
        if id.contains(['\n', '\r']) {
            return Err(Error::InvalidArgument(format!(
                "id {id:?} contains a line break and cannot be stored"
            )));
        }
        ids.push_str(id);
        ids.push('\n');
    }
    write_atomic(path, &encode_emb(set))?;
    write_atomic(&ids_path(path), ids.as_bytes())
}

/// Decodes a matrix file, returning `(dim, count, values)`.
pub fn decode_emb(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), FormatError> {
    let path_buf = || path.to_path_buf();
    if bytes.len() < EMB_HEADER_LEN {
        if bytes.len() >= 8 && &bytes[..8] != EMB_MAGIC {
            return Err(FormatError::BadMagic {
                path: path_buf(),
                found: bytes[..8].to_vec(),
            });
        }
        return Err(FormatError::TruncatedHeader {
            path: path_buf(),
            expected: EMB_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..8] != EMB_MAGIC {
        return Err(FormatError::BadMagic {
            path: path_buf(),
            found: bytes[..8].to_vec(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != EMB_VERSION {
        return Err(FormatError::VersionMismatch {
            path: path_buf(),
            found: version,
            expected: EMB_VERSION,
        });
    }
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if dim == 0 || count == 0 {
        return Err(FormatError::BadHeader {
            path: path_buf(),
            message: format!("empty matrix (dim {dim}, count {count})"),
        });
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::BadHeader {
            path: path_buf(),
            message: format!("payload size overflows for dim {dim}, count {count}"),
        })?;
    let actual = (bytes.len() - EMB_HEADER_LEN) as u64;
    if actual < expected {
        return Err(FormatError::TruncatedPayload {
            path: path_buf(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes {
            path: path_buf(),
            expected,
            actual: actual - expected,
        });
    }
    let values = bytes[EMB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dim as usize, count as usize, values))
}

/// Reads a matrix file and its `.ids` sidecar. The set is shape-checked only;
/// duplicate ids or non-finite rows are left for validation to report.
pub fn read_emb(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (dim, count, values) = decode_emb(path, &bytes)?;
    let ids_file = ids_path(path);
    let text = fs::read_to_string(&ids_file).map_err(io_err(&ids_file))?;
    let ids: Vec<String> = text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect();
    if ids.len() != count {
        return Err(FormatError::IdCountMismatch {
            path: ids_file,
            expected: count as u64,
            actual: ids.len() as u64,
        }
        .into());
    }
    EmbeddingSet::from_raw(ids, values, dim, LABEL_FILE)
}

/// Converts a whitespace-separated text matrix (one row per line) into a set.
///
/// Ids default to the zero-based row number. Blank lines and `#` comments are skipped.
pub fn read_text_matrix(path: &Path, ids: Option<Vec<String>>) -> Result<EmbeddingSet> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut vectors = Vec::new();
    let mut dim = None;
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let start = vectors.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok.parse().map_err(|_| FormatError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("not a number: {tok:?}"),
            })?;
            vectors.push(v);
        }
        let width = vectors.len() - start;
        let d = *dim.get_or_insert(width);
        if width != d {
            return Err(FormatError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("row has {width} values, expected {d}"),
            }
            .into());
        }
        rows += 1;
    }
    let ids = match ids {
        Some(ids) if ids.len() != rows => {
            return Err(FormatError::IdCountMismatch {
                path: path.to_path_buf(),
                expected: rows as u64,
                actual: ids.len() as u64,
            }
            .into())
        }
        Some(ids) => ids,
        None => (0..rows).map(|i| i.to_string()).collect(),
    };
    EmbeddingSet::from_raw(ids, vectors, dim.unwrap_or(0), LABEL_FILE)
}

/// A model plus the metadata stored alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: AlignmentModel,
    /// Inputs are L2-normalized before the map is applied.
    pub normalize_input: bool,
    /// Free-form effective configuration echoed by the producer.
    pub config: serde_json::Value,
}

impl ModelFile {
    pub fn new(model: impl Into<AlignmentModel>) -> Self {
        Self {
            model: model.into(),
            normalize_input: false,
            config: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format: String,
    version: u32,
    kind: String,
    layer_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ridge_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default)]
    normalize_input: bool,
    param_count: u64,
    #[serde(default)]
    config: serde_json::Value,
}

pub fn encode_model(file: &ModelFile) -> Result<Vec<u8>> {
    let (header, params): (ModelHeader, Vec<f32>) = match &file.model {
        AlignmentModel::Linear(map) => (
            ModelHeader {
                format: MODEL_FORMAT.into(),
                version: MODEL_VERSION,
                kind: "linear".into(),
                layer_dims: vec![map.source_dim(), map.target_dim()],
                preset: None,
                ridge_lambda: Some(map.ridge_lambda()),
                train_config: None,
                seed: None,
                normalize_input: file.normalize_input,
                param_count: map.matrix().len() as u64,
                config: file.config.clone(),
            },
            map.matrix().to_vec(),
        ),
        AlignmentModel::Mlp(mlp) => (
            ModelHeader {
                format: MODEL_FORMAT.into(),
                version: MODEL_VERSION,
                kind: "mlp".into(),
                layer_dims: mlp.layer_dims(),
                preset: Some(mlp.preset()),
                ridge_lambda: None,
                train_config: mlp.config().cloned(),
                seed: mlp.config().map(|c| c.seed),
                normalize_input: file.normalize_input,
                param_count: mlp.network().param_count() as u64,
                config: file.config.clone(),
            },
            mlp.network().flatten(),
        ),
    };
    let mut out = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidArgument(format!("unserializable model header: {e}")))?;
    out.push(b'\n');
    out.reserve(params.len() * 4);
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_model(path: &Path, file: &ModelFile) -> Result<()> {
    write_atomic(path, &encode_model(file)?)
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<ModelFile> {
    let bad = |message: String| FormatError::BadHeader {
        path: path.to_path_buf(),
        message,
    };
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header terminator".into()))?;
    let header: ModelHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    if header.format != MODEL_FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)).into());
    }
    if header.version != MODEL_VERSION {
        return Err(FormatError::VersionMismatch {
            path: path.to_path_buf(),
            found: header.version,
            expected: MODEL_VERSION,
        }
        .into());
    }
    let payload = &bytes[split + 1..];
    if payload.len() % 4 != 0 || payload.len() as u64 / 4 != header.param_count {
        return Err(FormatError::ParamCountMismatch {
            path: path.to_path_buf(),
            declared: header.param_count,
            actual: payload.len() as u64 / 4,
        }
        .into());
    }
    let params: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let dims = &header.layer_dims;
    let model = match header.kind.as_str() {
        "linear" => {
            if dims.len() != 2 {
                return Err(bad(format!("linear model needs 2 dims, got {dims:?}")).into());
            }
            if header.param_count != (dims[0] * dims[1]) as u64 {
                return Err(bad(format!(
                    "param_count {} does not match dims {dims:?}",
                    header.param_count
                ))
                .into());
            }
            let ridge = header.ridge_lambda.unwrap_or(0.0);
            AlignmentModel::Linear(LinearMap::new(params, dims[0], dims[1], ridge)?)
        }
        "mlp" => {
            if dims.len() < 2 || header.param_count != param_count(dims) as u64 {
                return Err(bad(format!(
                    "param_count {} does not match layer dims {dims:?}",
                    header.param_count
                ))
                .into());
            }
            let net = Network::from_flat(dims, &params)?;
            let preset = header.preset.unwrap_or(Preset::Custom);
            AlignmentModel::Mlp(MlpModel::new(net, preset, header.train_config)?)
        }
        other => return Err(bad(format!("unknown model kind {other:?}")).into()),
    };
    Ok(ModelFile {
        model,
        normalize_input: header.normalize_input,
        config: header.config,
    })
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_model(path, &bytes)
}

fn kind_mismatch(path: &Path, expected: &str, found: &AlignmentModel) -> Error {
    FormatError::KindMismatch {
        path: path.to_path_buf(),
        expected: expected.into(),
        found: found.kind().into(),
    }
    .into()
}

pub fn read_linear_model(path: &Path) -> Result<LinearMap> {
    match read_model(path)?.model {
        AlignmentModel::Linear(m) => Ok(m),
        other => Err(kind_mismatch(path, "linear", &other)),
    }
}

pub fn read_mlp_model(path: &Path) -> Result<MlpModel> {
    match read_model(path)?.model {
        AlignmentModel::Mlp(m) => Ok(m),
        other => Err(kind_mismatch(path, "mlp", &other)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QrelsLoad {
    pub qrels: Qrels,
    /// Lines with relevance ≤ 0.
    pub dropped_nonpositive: usize,
    pub duplicates: usize,
}

/// Parses `query_id<TAB>doc_id<TAB>relevance` lines. Blank and `#` lines are skipped.
pub fn parse_qrels(path: &Path, text: &str) -> Result<QrelsLoad, FormatError> {
    let mut load = QrelsLoad {
        qrels: Qrels::new(),
        dropped_nonpositive: 0,
        duplicates: 0,
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| FormatError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let (q, d) = (fields[0].trim(), fields[1].trim());
        if q.is_empty() || d.is_empty() {
            return Err(err("empty query or document id".into()));
        }
        let rel: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("relevance {:?} is not a number", fields[2])))?;
        if rel <= 0.0 {
            load.dropped_nonpositive += 1;
            continue;
        }
        if !load.qrels.insert(q, d) {
            load.duplicates += 1;
        }
    }
    Ok(load)
}

pub fn read_qrels(path: &Path) -> Result<QrelsLoad> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_qrels(path, &text)?)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, docs) in qrels.iter() {
        for d in docs {
            out.push_str(&format!("{q}\t{d}\t1\n"));
        }
    }
    out
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    write_atomic(path, format_qrels(qrels).as_bytes())
}

/// Run TSV: a `#metric=…\tk=…` line, a column header, then
/// `query_id<TAB>rank<TAB>doc_id<TAB>score` rows with 1-based ranks.
pub fn format_run(run: &RetrievalRun) -> String {
    let mut out = format!("#metric={}\tk={}\n#query_id\trank\tdoc_id\tscore\n", run.metric, run.k);
    for r in &run.rankings {
        for (rank, hit) in r.hits.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.query_id, rank + 1, hit.doc_id, hit.score));
        }
    }
    out
}

pub fn write_run(path: &Path, run: &RetrievalRun) -> Result<()> {
    write_atomic(path, format_run(run).as_bytes())
}

pub fn parse_run(path: &Path, text: &str) -> Result<RetrievalRun, FormatError> {
    let mut metric = Metric::Cosine;
    let mut declared_k = None;
    let mut rankings: Vec<Ranking> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let err = |message: String| FormatError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split('\t') {
                match kv.split_once('=') {
                    Some(("metric", v)) => {
                        metric = v.parse().map_err(|_| err(format!("unknown metric {v:?}")))?
                    }
                    Some(("k", v)) => {
                        declared_k = Some(v.parse::<usize>().map_err(|_| err(format!("bad k {v:?}")))?)
                    }
                    _ => {}
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let rank: usize = f[1].parse().map_err(|_| err(format!("bad rank {:?}", f[1])))?;
        let score: f64 = f[3].parse().map_err(|_| err(format!("bad score {:?}", f[3])))?;
        let slot = *index.entry(f[0].to_string()).or_insert_with(|| {
            rankings.push(Ranking {
                query_id: f[0].to_string(),
                hits: Vec::new(),
            });
            rankings.len() - 1
        });
        let hits = &mut rankings[slot].hits;
        if rank != hits.len() + 1 {
            return Err(err(format!(
                "rank {rank} out of sequence for query {:?} (expected {})",
                f[0],
                hits.len() + 1
            )));
        }
        hits.push(Hit {
            doc_id: f[2].to_string(),
            score,
        });
    }
    let longest = rankings.iter().map(|r| r.hits.len()).max().unwrap_or(0);
    Ok(RetrievalRun {
        metric,
        k: declared_k.unwrap_or(longest),
        rankings,
    })
}

pub fn read_run(path: &Path) -> Result<RetrievalRun> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_run(path, &text)?)
}
