//! Instruction-following from a small labeled set and a large unlabeled
//! set of demonstrations on a grid tabletop.
//!
//! Language and `(start, goal)` image pairs are embedded into one space by
//! contrastive alignment; a FiLM-conditioned policy then learns from both
//! labeled instructions and relabeled goal images. `eval::ablation` runs the
//! full variant matrix.

pub mod align;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod optim;
pub mod params;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod tensor;
mod wire;

pub use autodiff::{Grads, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
