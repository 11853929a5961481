//! Multiview two-task recursive attention segmentation.
//!
//! A self-contained f64 implementation of a two-task left-atrium model:
//! an axial ConvLSTM branch, two dilated residual view branches, additive
//! multiview fusion, a dilated attention mask and two sigmoid heads trained
//! with a hybrid soft-Dice loss. Includes synthetic phantoms with exact
//! ground truth, an Adam trainer, evaluation metrics with scar-burden
//! agreement statistics, and finite-difference gradient verification.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `mvtt` binary, which exposes the same capabilities as subcommands.

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod net;
pub mod params;
pub mod phantom;
pub mod recurrent;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{MvttConfig, MvttModel};
pub use phantom::{PhantomSpec, Volume, VolumeKind};
pub use tensor::Tensor;
