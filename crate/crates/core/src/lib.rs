//! Federated graph attention regression on multilayer brain connectivity graphs.

pub mod autodiff;
pub mod datagen;
pub mod explain;
pub mod dataset;
pub mod graph;
pub mod model;
pub mod seed;
pub mod training;
pub mod transport;
pub mod federation;
