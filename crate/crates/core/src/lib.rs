//! Source-free realignment of vision-language embedding spaces.
//!
//! The pipeline removes the modality gap by projecting both image and text
//! embeddings onto the span of the class text embeddings, generates pseudo
//! labels by label propagation on an image/text affinity graph, and then
//! refines lightweight affine adapters on each side with two-branch
//! self-training that keeps only labels both branches agree on.

pub mod adapt;
pub mod affinity;
pub mod cg;
pub mod container;
pub mod embedstore;
pub mod error;
pub mod harness;
pub mod labelprop;
pub mod projection;
pub mod selftrain;

pub use adapt::{AffineAdapter, ClassCenters, OptimizerState};
pub use affinity::SparseMatrix;
pub use container::Container;
pub use embedstore::{ClassCatalog, EmbeddingSet, LabelVector, Template};
pub use error::{Error, Result};
pub use harness::{EvalReport, SynthSpec};
pub use labelprop::{LabelPropConfig, LabelSource, PseudoLabelSet};
pub use projection::{ProjectionBasis, Variant};
pub use selftrain::{Branch, BranchState, Mode, RunConfig, RunOutput};
