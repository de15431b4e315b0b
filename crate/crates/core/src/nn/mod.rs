//! Minimal differentiable-computation kernel.
//!
//! Everything learnable in the crate is built from the pieces here: named
//! parameter tensors ([`ModuleParams`]), a reverse-mode tape ([`Tape`]) that
//! records vector operations, a handful of layers ([`Linear`], [`Mlp`],
//! [`GruCell`]), losses, optimizers and a central-difference gradient checker.
//!
//! The tape borrows parameter stores immutably. A backward pass returns a
//! [`Gradients`] value that the caller folds into the stores with
//! [`ModuleParams::accumulate`] before taking an optimizer step.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod optim;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointTensor, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{gradient_check, scaled, GradCheckOptions, CHECK_SCALE};
pub use layers::{Activation, GruCell, Linear, Mlp};
pub use loss::{binary_cross_entropy, mean_binary_cross_entropy, softmax, softmax_cross_entropy, PROB_EPS};
pub use optim::{OptimizerConfig, OptimizerState, UpdateRule};
pub use params::{ModuleParams, ParamId, ParamTensor};
pub use tape::{Gradients, StoreId, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension { context: String, expected: usize, actual: usize },
    #[error("class index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub(crate) fn check_dim(context: &str, expected: usize, actual: usize) -> Result<(), NnError> {
    if expected == actual {
        Ok(())
    } else {
        Err(NnError::Dimension {
            context: context.to_string(),
            expected,
            actual,
        })
    }
}
