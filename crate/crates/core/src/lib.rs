//! Real-time style semantic segmentation at desk scale.
//!
//! A small dual-resolution network with a multi-scale fusion block on its
//! lowest-resolution features ([`lmfm`]), trained with cross-entropy plus a
//! boundary corrected hard-sample loss ([`bcl`]). Everything runs on a
//! self-contained `f64` reverse-mode engine ([`tape`]).

pub mod bcl;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod labels;
pub mod lmfm;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use bcl::BclConfig;
pub use cost::Cost;
pub use error::{Error, Result};
pub use labels::LabelMap;
pub use lmfm::{Connection, LmfmConfig, Scale};
pub use network::{NetConfig, Network};
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
