//! Scene graph prediction from segmented 3D scans.

pub mod features;
pub mod gnn;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rescore;
pub mod scene;
pub mod synthetic;
pub mod tensor;
pub mod train;
