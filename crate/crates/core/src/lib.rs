//! Multi-LUT image restoration: retrieval, construction and finetuning of
//! networks of sampled look-up tables.

pub mod costmodel;
pub mod engine;
pub mod evalkit;
pub mod finetune;
pub mod format;
pub mod image;
pub mod interp;
pub mod lut;
pub mod netpbm;
pub mod pattern;
pub mod pipelines;
pub mod reference;
pub mod transfer;

pub use engine::{ChannelBlock, EngineError, Pipeline, SpatialBlock, Stage, StageLayout};
pub use format::{read_lut, write_lut, FormatError, LutFile, LutHeader, Role};
pub use image::{ImagePlane, RationalPlane};
pub use interp::{simplex_interp_4d, tetrahedral_interp_3d, Simplex};
pub use lut::{lut_size_bytes, LutError, LutTable, SamplingGrid};
pub use pattern::Pattern;
