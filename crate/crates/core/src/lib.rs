//! Aligning a local embedding model with a server model so that queries can
//! be searched on the server side without sending the raw server-space vector.
//!
//! The crate covers fitting a linear or MLP map between the two spaces,
//! exact top-k retrieval and recall, deviation metrics with a Gaussian-noise
//! baseline, synthetic data generation, and the on-disk formats.

pub mod embedding;
pub mod error;
pub mod io;
pub mod linear;
pub mod mlp;
pub mod model;
pub mod privacy;
pub mod retrieval;
pub mod synth;

pub use embedding::{AlignmentPairs, Diagnostic, EmbeddingSet};
pub use error::{Error, FormatError, Result};
pub use linear::{apply_linear, fit_linear, LinearFit, LinearMap};
pub use mlp::{apply_mlp, train_mlp, Architecture, MlpModel, Preset, TrainConfig};
pub use model::AlignmentModel;
pub use retrieval::{recall_at_k, search_topk, Metric, Qrels, RetrievalRun};
