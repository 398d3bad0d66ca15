//! Training, evaluation and ablation harness for [`handgcat_core`], with the
//! on-disk formats for datasets and checkpoints.

pub use handgcat_core as core;

pub mod blob;
pub mod config;
pub mod dataset;
pub mod checkpoint;
pub mod evaluate;
pub mod train;
pub mod ablate;
pub mod gradcheck;
