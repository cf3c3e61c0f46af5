//! Self-supervised spatiotemporal distillation for video transformers.
//!
//! A student network learns to predict, from short or cropped local views,
//! what an EMA teacher sees in global views of the same video. Frozen
//! features are then scored with a linear probe.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod model;
pub mod objective;
pub mod probe;
pub mod sampling;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
