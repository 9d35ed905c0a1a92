//! Backbone families, training loop, checkpoints and batched inference for the
//! ultrasound hybrid ensemble.
//!
//! Networks run on the CPU in `f32` on top of `candle`. Each of the five families
//! has a published-size layout and a tiny layout that trains in seconds.

pub mod arch;
pub mod backbone;
pub mod checkpoint;
pub mod data;
mod error;
pub mod inference;
pub mod layers;
pub mod ops;
pub mod params;
pub mod trainer;

pub use backbone::{build_model, build_model_seeded, BackboneSpec, Mode, ModelHandle, Scale};
pub use checkpoint::{load_checkpoint, open_checkpoint, read_checkpoint_info, save_checkpoint, CheckpointInfo};
pub use error::ModelError;
pub use data::ImageSet;
pub use trainer::{train, train_on, TrainConfig, TrainError, TrainReport};
