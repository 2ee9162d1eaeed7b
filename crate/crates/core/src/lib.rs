//! Index insurance under exponential utility: demand, solvency and hybrid design.
//!
//! Numerical kernels in [`stats`], [`utility`] and [`solvency`] are generic over
//! [`Scalar`]; the aliases below fix them to `f64`.

pub mod claims;
pub mod error;
pub mod hybrid;
pub mod models;
pub mod scalar;
pub mod solvency;
pub mod stats;
pub mod utility;

pub use claims::{ClaimDataset, ClaimRecord, StratumFilter};
pub use error::{Error, Result};
pub use models::{Method, PayoutModel};
pub use scalar::Scalar;
pub use utility::{Basis, PreferenceModel};

pub type Gpd = stats::GpdTail<f64>;
pub type Aversion = utility::AversionDistribution<f64>;
pub type Moments = solvency::PortfolioMoments<f64>;
pub type Solvency = solvency::SolvencyParams<f64>;
