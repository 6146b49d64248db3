//! Desk-scale instance-segmentation building blocks: a dense f64 autodiff
//! tensor engine, a tiny backbone with top-down and bottom-up feature
//! pyramids, multi-level RoI pooling with fusion statistics, box/mask heads
//! with fusion ablation switches, and synchronized batch normalization over
//! simulated device shards.

pub mod error;
pub mod heads;
pub mod pyramid;
pub mod roi;
pub mod syncbn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
