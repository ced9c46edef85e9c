//! Cross-view video person re-identification: a frozen frame encoder wrapped
//! by view, scale, memory, temporal and alignment adapters, with the training
//! objectives, two-stage trainer and retrieval evaluation around them.

pub mod align;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod memory;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod temporal;
pub mod training;
pub mod types;
pub mod view_scale;

pub use autodiff::{Graph, Param, Tensor, Var};
pub use error::{Error, Result};
pub use types::{ClipDescriptor, ClipTokens, ClipVar, TrackletRecord, ViewId};
