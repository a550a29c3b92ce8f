//! File formats and the experiment runner around `lmmvae-core`: dataset
//! CSVs, JSON model checkpoints, and replicate experiment orchestration.

pub mod checkpoint;
pub mod dataset;
pub mod experiment;
