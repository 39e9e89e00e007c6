//! The grounded language model: frozen vision encoder, projector, causal
//! decoder and the EDIT-token localization decoder.

mod bundle;
pub mod checkpoint;
mod config;
mod generate;
mod image;
mod network;

pub use bundle::{ModelBundle, Param};
pub use config::{FreezeFlags, Group, ModelConfig};
pub use generate::{generate, DecodeMode, Generation};
pub use image::Image;
pub use network::{
    encode_image, forward_teacher_forced, localize, Bound, Decoded, EditEmbedding, FeatureGrid,
    ForwardOutput, Net, MIN_BOX_SIZE,
};
