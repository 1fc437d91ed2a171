//! Embedding sets, pairing, and the vector math shared by every other module.
//!
//! Vectors are stored as `f32` in a flat row-major buffer. Every reduction
//! (dot products, norms) accumulates in `f64`.

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const LABEL_LOCAL: &str = "local";
pub const LABEL_SERVER: &str = "server";
pub const LABEL_APPROX: &str = "approx";

/// Ordered ids plus an `m x dim` matrix of vectors living in one embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    vectors: Vec<f32>,
    dim: usize,
    space_label: String,
}

impl EmbeddingSet {
    /// Builds a set and checks every invariant: shape, unique ids, finite values.
    pub fn new(
        ids: Vec<String>,
        vectors: Vec<f32>,
        dim: usize,
        space_label: impl Into<String>,
    ) -> Result<Self> {
        let set = Self::from_raw(ids, vectors, dim, space_label)?;
        let diags = set.diagnostics(Side::Single);
        if diags.is_empty() {
            Ok(set)
        } else {
            Err(Error::InvalidSet(diags))
        }
    }

    /// Builds a set checking only its shape.
    ///
    /// Readers use this so that content problems (duplicate ids, NaN rows) can be
    /// reported together by [`validate_pairs`] instead of failing on the first one.
    pub fn from_raw(
        ids: Vec<String>,
        vectors: Vec<f32>,
        dim: usize,
        space_label: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dim must be at least 1".into()));
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("an embedding set needs at least one row".into()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "vector buffer length vs ids x dim",
                expected: ids.len() * dim,
                actual: vectors.len(),
            });
        }
        Ok(Self {
            ids,
            vectors,
            dim,
            space_label: space_label.into(),
        })
    }

    pub fn from_rows<S: Into<String>>(
        rows: impl IntoIterator<Item = (S, Vec<f32>)>,
        space_label: impl Into<String>,
    ) -> Result<Self> {
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        let mut dim = None;
        for (id, row) in rows {
            let d = *dim.get_or_insert(row.len());
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "row length",
                    expected: d,
                    actual: row.len(),
                });
            }
            ids.push(id.into());
            vectors.extend(row);
        }
        Self::new(ids, vectors, dim.unwrap_or(0), space_label)
    }

    pub fn from_array(
        ids: Vec<String>,
        matrix: Array2<f32>,
        space_label: impl Into<String>,
    ) -> Result<Self> {
        let dim = matrix.ncols();
        let vectors = if matrix.is_standard_layout() {
            matrix.into_raw_vec_and_offset().0
        } else {
            matrix.iter().copied().collect()
        };
        Self::from_raw(ids, vectors, dim, space_label)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn space_label(&self) -> &str {
        &self.space_label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.space_label = label.into();
        self
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.dim), &self.vectors)
            .expect("buffer length checked at construction")
    }

    /// Rows reordered by `order` (indices into this set).
    pub fn select(&self, order: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(order.len());
        let mut vectors = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            ids.push(self.ids[i].clone());
            vectors.extend_from_slice(self.row(i));
        }
        Self::from_raw(ids, vectors, self.dim, self.space_label.clone())
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<f32>, usize, String) {
        (self.ids, self.vectors, self.dim, self.space_label)
    }

    fn diagnostics(&self, side: Side) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(self.len());
        for (row, id) in self.ids.iter().enumerate() {
            if let Some(&first) = seen.get(id.as_str()) {
                out.push(Diagnostic::DuplicateId {
                    side,
                    id: id.clone(),
                    first,
                    second: row,
                });
            } else {
                seen.insert(id, row);
            }
        }
        for (row, v) in self.rows().enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                out.push(Diagnostic::NonFinite {
                    side,
                    row,
                    id: self.ids[row].clone(),
                });
            }
        }
        out
    }
}

/// Which set of a pair a diagnostic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Single,
    Local,
    Server,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Single => "set",
            Side::Local => "local set",
            Side::Server => "server set",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    RowCountMismatch { local: usize, server: usize },
    IdMismatch { row: usize, local_id: String, server_id: String },
    DuplicateId { side: Side, id: String, first: usize, second: usize },
    NonFinite { side: Side, row: usize, id: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::RowCountMismatch { local, server } => {
                write!(f, "row count mismatch: local has {local}, server has {server}")
            }
            Diagnostic::IdMismatch { row, local_id, server_id } => write!(
                f,
                "id mismatch at row {row}: local {local_id:?} vs server {server_id:?}"
            ),
            Diagnostic::DuplicateId { side, id, first, second } => {
                write!(f, "{side}: duplicate id {id:?} at rows {first} and {second}")
            }
            Diagnostic::NonFinite { side, row, id } => {
                write!(f, "{side}: non-finite value in row {row} (id {id:?})")
            }
        }
    }
}

/// Local and server embeddings of the same texts, in the same order.
#[derive(Debug, Clone)]
pub struct AlignmentPairs {
    pub local: EmbeddingSet,
    pub server: EmbeddingSet,
}

impl AlignmentPairs {
    /// Pairs two sets without checking them; see [`validate_pairs`].
    pub fn new(local: EmbeddingSet, server: EmbeddingSet) -> Self {
        Self { local, server }
    }

    /// Pairs two sets, failing with every diagnostic if they do not line up.
    pub fn checked(local: EmbeddingSet, server: EmbeddingSet) -> Result<Self> {
        let pairs = Self::new(local, server);
        pairs.ensure_valid()?;
        Ok(pairs)
    }

    pub fn len(&self) -> usize {
        self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local.is_empty()
    }

    pub(crate) fn ensure_valid(&self) -> Result<()> {
        let diags = validate_pairs(self);
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidPairs(diags))
        }
    }
}

/// Checks every pairing invariant and returns all violations found.
///
/// An empty list means the pairs are valid.
pub fn validate_pairs(pairs: &AlignmentPairs) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let (l, s) = (&pairs.local, &pairs.server);
    if l.len() != s.len() {
        out.push(Diagnostic::RowCountMismatch {
            local: l.len(),
            server: s.len(),
        });
    }
    for (row, (a, b)) in l.ids().iter().zip(s.ids()).enumerate() {
        if a != b {
            out.push(Diagnostic::IdMismatch {
                row,
                local_id: a.clone(),
                server_id: b.clone(),
            });
        }
    }
    out.extend(l.diagnostics(Side::Local));
    out.extend(s.diagnostics(Side::Server));
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Mean over rows of the squared Euclidean distance between matching rows.
///
/// Both sets must have the same shape.
pub fn mean_squared_row_error(a: &EmbeddingSet, b: &EmbeddingSet) -> f64 {
    debug_assert_eq!(a.vectors.len(), b.vectors.len());
    let total: f64 = a.rows().zip(b.rows()).map(|(x, y)| squared_distance(x, y)).sum();
    total / a.len() as f64
}

/// Cosine of the angle between `a` and `b`.
///
/// Zero-norm inputs are an error rather than a silent 0 or NaN.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine operands",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales every row to unit Euclidean norm, keeping ids and order.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut vectors = Vec::with_capacity(set.vectors.len());
    for (row, v) in set.rows().enumerate() {
        let n = norm(v);
        if n == 0.0 {
            return Err(Error::Degenerate(format!(
                "cannot normalize zero-norm row {row} (id {:?})",
                set.ids[row]
            )));
        }
        vectors.extend(v.iter().map(|&x| (x as f64 / n) as f32));
    }
    EmbeddingSet::from_raw(set.ids.clone(), vectors, set.dim, set.space_label.clone())
}
