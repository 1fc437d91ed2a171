use crate::embedding::EmbeddingSet;
use crate::error::Result;
use crate::linear::{apply_linear, LinearMap};
use crate::mlp::{apply_mlp, MlpModel};

/// A learned map from the local embedding space into the server space.
#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentModel {
    Linear(LinearMap),
    Mlp(MlpModel),
}

impl AlignmentModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AlignmentModel::Linear(_) => "linear",
            AlignmentModel::Mlp(_) => "mlp",
        }
    }

    pub fn source_dim(&self) -> usize {
        match self {
            AlignmentModel::Linear(m) => m.source_dim(),
            AlignmentModel::Mlp(m) => m.source_dim(),
        }
    }

    pub fn target_dim(&self) -> usize {
        match self {
            AlignmentModel::Linear(m) => m.target_dim(),
            AlignmentModel::Mlp(m) => m.target_dim(),
        }
    }

    /// Maps every row of `set`; the result is labelled `approx`.
    pub fn apply(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        match self {
            AlignmentModel::Linear(m) => apply_linear(m, set),
            AlignmentModel::Mlp(m) => apply_mlp(m, set),
        }
    }
}

impl From<LinearMap> for AlignmentModel {
    fn from(m: LinearMap) -> Self {
        AlignmentModel::Linear(m)
    }
}

impl From<MlpModel> for AlignmentModel {
    fn from(m: MlpModel) -> Self {
        AlignmentModel::Mlp(m)
    }
}
