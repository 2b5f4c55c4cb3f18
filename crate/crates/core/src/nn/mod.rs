//! Dense tensors with a reverse-mode tape.

mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Manifest, ManifestEntry,
    CHECKPOINT_MAGIC,
};
pub use conv::{ConvGeom, Padding};
pub use gradcheck::{grad_check, grad_check_where, GradCheckReport};
pub use graph::{Gradients, Graph, SamplePoint, Var};
pub(crate) use graph::log_sigmoid;
pub use layers::{Conv2d, Deconv2d};
pub use optim::Adam;
pub use params::{he_normal, normal_tensor, Bound, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
