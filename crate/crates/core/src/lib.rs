//! Multiscale atlas-guided hierarchical graph convolutional networks for
//! connectome classification, with the supporting tensor tape, atlas
//! tooling, training harness, attribution and statistics.
//!
//! Numeric code is generic over [`scalar::Real`]; the aliases below fix it
//! to `f64`.

pub mod atlas;
pub mod config;
pub mod connectome;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod explain;
pub mod io;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorClass, Result};

pub type Tensor = diffcore::Tensor2D<f64>;
pub type Tape = diffcore::Tape<f64>;
pub type Fcn = connectome::FcnMatrix<f64>;
pub type TimeSeries = connectome::RoiTimeSeries<f64>;
pub type Stack = connectome::ScaleStack<f64>;
pub type Params = model::MahgcnParams<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
pub type Graphs = model::SampleGraphs<f64>;
pub type Data = dataset::Dataset<f64>;
