mod codec;
pub mod classifier;
pub mod dataio;
pub mod diffnet;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod linstats;
pub mod pcu;
pub mod project;
pub mod protocol;
pub mod seeds;
pub mod scalar;

pub use error::{LdcError, Result};
pub use scalar::Real;

/// Double-precision instantiations used throughout the pipeline.
pub type Matrix = linalg::Matrix<f64>;
pub type GaussianStats = linstats::GaussianStats<f64>;
pub type SharedCovariance = linstats::SharedCovariance<f64>;
pub type SampleSet = linstats::SampleSet<f64>;
pub type Net = diffnet::Net<f64>;
pub type ClassifierState = classifier::ClassifierState<f64>;
