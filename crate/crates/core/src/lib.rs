//! Domain-prompted object detection for aerial imagery.
//!
//! A small anchor-based detector is trained together with learnable
//! per-domain text prompts. The prompts are fitted to image embeddings of
//! each shooting condition (altitude, view, weather), and the detector's
//! squeezed features are pulled toward the image embedding and away from
//! the domain prompts. At inference the detector runs alone.
//!
//! The `examples/` directory holds one runnable program per capability;
//! the `leapd` binary wraps the same library calls as batch commands.

pub mod alignment;
pub mod bbox;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod detector;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod prompting;
pub mod render;
pub mod sample;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
