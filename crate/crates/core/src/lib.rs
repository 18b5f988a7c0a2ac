//! Document dewarping by direct thin-plate-spline mesh optimization, plus
//! Fourier photometric restoration and evaluation metrics.

pub mod deform;
pub mod error;
pub mod fitloss;
pub mod image;
pub mod metrics;
pub mod synthetic;
pub mod fourier;
pub mod tps;

pub use error::{Error, Result};
pub use image::{ImageBuf, SampleGrad};
pub use tps::{MeshGrid, TpsCoefficients};
