//! Structured channel pruning for small convolutional networks.
//!
//! The toolkit removes whole channels from a pre-trained CNN while keeping the
//! network dense. Channel subsets are searched per layer by a genetic
//! algorithm whose fitness is a second-order approximation of the layer-wise
//! reconstruction error, and accuracy is restored afterwards with
//! attention-transfer fine-tuning against the unpruned teacher.
//!
//! Crate layout:
//! - [`tensor`], [`net`], [`optim`], [`stats`], [`container`] — a minimal
//!   deterministic CNN engine (forward with activation capture, SGD training,
//!   params/FLOPs accounting, on-disk model containers).
//! - [`data`] — IDX / CIFAR-binary / synthetic dataset ingestion and
//!   augmentation.
//! - [`sampler`] — input-volume sampling for a target conv layer.
//! - [`fitness`] — Hessian construction, second-order error, exact
//!   reconstruction error, population fitness scaling.
//! - [`genetic`] — the per-layer mask search.
//! - [`pruner`] — surgery, sensitivity scanning, plans, the whole-model
//!   pipeline and baseline selection criteria.
//! - [`distill`] — attention maps and teacher-student fine-tuning.

pub mod container;
pub mod data;
pub mod distill;
mod error;
pub mod fitness;
pub mod genetic;
pub mod net;
pub mod optim;
pub mod pruner;
pub mod sampler;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
