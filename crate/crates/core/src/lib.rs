//! Image clustering by multi-level cross-modal alignment over frozen
//! image and text embeddings.
//!
//! The pipeline: build a filtered noun space ([`semantic_space`]), compute
//! exact neighborhoods ([`knn_index`]), then train linear cluster heads and an
//! attention pseudo-labeler ([`trainer`]) under the combined objective in
//! [`losses_grad`]. [`metrics`] scores the result, [`diagnostics`] measures the
//! quantities the risk bound depends on, and [`synthetic_gen`] produces paired
//! data with known clusters for desk-scale experiments.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below fix it to `f64`
//! (training, gradient checks) or `f32` (storage precision).

pub mod cli;
pub mod diagnostics;
pub mod embedding_io;
pub mod error;
pub mod knn_index;
pub mod losses_grad;
pub mod metrics;
pub mod model_core;
pub mod pseudo_label_bench;
pub mod scalar;
pub mod semantic_space;
pub mod synthetic_gen;
pub mod taxonomy;
pub mod trainer;

pub use error::{McaError, Result};
pub use scalar::Scalar;

pub type Embeddings = embedding_io::EmbeddingMatrix<f64>;
pub type Embeddings32 = embedding_io::EmbeddingMatrix<f32>;
pub type Dataset = embedding_io::DatasetBundle<f64>;
pub type Vocabulary = embedding_io::VocabularyBundle<f64>;
pub type Params = model_core::ModelParams<f64>;
pub type Params32 = model_core::ModelParams<f32>;
pub type Assignment = model_core::SoftAssignment<f64>;
pub type Neighbors = knn_index::NeighborIndex<f64>;
pub type Space = semantic_space::SemanticSpace<f64>;
pub type Gradients = losses_grad::GradientSet<f64>;
pub type Losses = losses_grad::LossBreakdown<f64>;
