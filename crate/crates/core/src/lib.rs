//! Network transplanting: grow a modular net of frozen category and task
//! modules by learning small adapters with back-distillation.
//!
//! A transplant inserts a pretrained category module `f` under a task module
//! `g_S` through an adapter `h`. The adapter is trained so that the
//! pseudo-gradients of `g_S∘h` w.r.t. `f`'s features match those of the
//! teacher's native task module, which needs few or no labeled samples.

pub mod cli;
pub mod config;
pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model_file;
pub mod net;
pub mod ops;
pub mod pseudograd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{NetModule, TaskKind, TransplantNet};
pub use tensor::{Rng, Tensor};
