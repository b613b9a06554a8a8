//! Parameter-efficient multimodal adaptation of a frozen bidirectional masked
//! language model for video question answering.
//!
//! A frozen encoder is extended with learnable key/value text prompts in every
//! self-attention layer, residual bottleneck adapters, and a latent
//! cross-attention network that compresses per-frame video features into a
//! fixed number of video tokens. Everything is trained with a masked language
//! modeling objective and evaluated by scoring a restricted answer vocabulary
//! at a single mask position.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod lm;
pub mod mapper;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompts;
pub mod qa;
pub mod tensor;
pub mod text;
pub mod train;
pub mod video;

pub use error::{Error, Result};
