//! Anatomical labeling of 3D branching trees with point-graph fusion
//! networks and implicit dense reconstruction.
//!
//! The numeric core is generic over [`Real`]; `f32` is used for training and
//! inference, `f64` for gradient checks. The aliases below name the common
//! instantiations.

pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod implicit;
pub mod nn;
pub mod scalar;
pub mod skeleton;
pub mod spatial;
pub mod synth;
pub mod train;
pub mod volume;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use implicit::{Ipgn, ModelConfig};
pub use scalar::Real;
pub use volume::LabelVolume;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Graph32 = nn::Graph<f32>;
pub type Graph64 = nn::Graph<f64>;
pub type SpatialIndex32 = spatial::SpatialIndex<f32>;
pub type SpatialIndex64 = spatial::SpatialIndex<f64>;
pub type Scene32 = implicit::Scene<f32>;
pub type Scene64 = implicit::Scene<f64>;
