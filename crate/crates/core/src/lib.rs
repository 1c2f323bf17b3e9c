//! Language-guided dynamic convolution.
//!
//! A LaConv layer predicts a separate depth-wise filter bank for every
//! spatial position of a visual feature map. The filters are generated from a
//! condition matrix obtained by attending from (pixel-packed) image tokens to
//! the words of a referring expression, so the same image is filtered
//! differently for different texts. [`net`] stacks these layers into a
//! pool-separated backbone, [`synth`] provides a synthetic grounding task and
//! [`train`] fits the whole thing with Adam and a warmup/cosine schedule.
//!
//! Everything runs on the small reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod kernels;
pub mod laconv;
pub mod linalg;
pub mod net;
pub mod par;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
