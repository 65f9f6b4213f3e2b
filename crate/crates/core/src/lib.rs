//! Deep taxonomic networks.
//!
//! A variational autoencoder whose latent prior is a mixture of Gaussians
//! laid out on a complete binary tree: leaves carry learnable Gaussians,
//! every internal node is the moment-matched blend of its two children, and
//! every node (not just the leaves) is a cluster a sample can be assigned to.
//!
//! Modules:
//! - [`taxonomy`]: the tree prior and its Gaussian algebra
//! - [`model`]: encoders, decoders and projection heads
//! - [`objective`]: ELBO terms, tree regularizers, NT-Xent, diagnostics
//! - [`trainer`]: the optimization loop, augmentation and checkpoints
//! - [`evaluation`]: annotation-matrix classification and clustering metrics
//! - [`data`]: IDX and feature-file loaders, synthetic tree data

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod objective;
pub mod optim;
pub mod taxonomy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use evaluation::{AnnotationMatrix, AssignmentTable, MetricsReport};
pub use model::{LatentPosterior, Likelihood, Model, ModelSpec};
pub use objective::{LossBreakdown, LossWeights};
pub use taxonomy::{ClusterPosterior, NodeParams, TaxonomyTree, VarianceMode};
pub use tensor::Tensor;
pub use trainer::TrainConfig;
