//! Multi-agent panoptic segmentation forecasting at desk scale.

pub mod encdec;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod attention;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod refine;

pub use error::{Error, Result};
pub use linalg::{Graph, ParamStore, SeededRng, Tensor, Var};
