//! CAM record handling, the record-to-scenario pipeline, connectivity
//! graphs, evaluation metrics and the constant velocity baseline.

pub mod baselines;
pub mod cam;
pub mod dataset;
pub mod geo;
pub mod graphs;
pub mod metrics;
pub mod pipeline;
pub mod records;
pub mod scenario;
pub mod synth;
pub mod track;
