//! From-scratch CPU implementation of a small-target segmentation network:
//! hierarchical large-kernel convolutions, dynamic local-context attention,
//! coarse-to-fine residual blocks, a U-Net assembly, soft-IoU training, and
//! the detection-metric evaluation protocol — with a tape-based autodiff
//! engine and analytic parameter/FLOP accounting.

pub mod attention;
pub mod autodiff;
pub mod block;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hlk;
pub mod layers;
pub mod net;
pub mod ops;
pub mod real;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, grad_check_param, NodeId, ParamId, Params, Tape};
pub use error::{Error, Result};
pub use net::{build_model, load_checkpoint, save_checkpoint, LcrNet, NetConfig};
pub use real::Real;
pub use tensor::{Activation, Shape, Tensor};
pub use train::TrainConfig;
