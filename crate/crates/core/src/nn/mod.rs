//! Small reverse-mode autodiff and the network building blocks on top of it.

mod checkpoint;
mod encoders;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, CHECKPOINT_VERSION};
pub use encoders::{farthest_point_sample, EncoderConfig, GraphEncoder, PointEncoder, PointPlan, SaLevel};
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use graph::{Graph, Groups, Var, LEAKY_SLOPE};
pub use layers::{GatLayer, Linear, Mlp, ATTENTION_INIT};
pub use optim::{adam_step, clip_grad_norm, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
