//! Semi-supervised segmentation with semantic-aware proxies.
//!
//! A small UNet-style backbone is trained on labeled and unlabeled images.
//! During training, learnable per-class proxies are refined by cross-attention
//! against multi-scale decoder features of labeled images (the supervised proxy
//! adaptor), and then reused as queries over unlabeled features (the
//! unsupervised consistent learner). Both heads are dropped at inference.
//!
//! Everything runs on a from-scratch reverse-mode autodiff tape in `f64`.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{IclError, Result};
pub use tensor::Tensor;
