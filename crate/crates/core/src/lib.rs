pub mod aggregation;
pub mod calibration;
pub mod cli;
pub mod data;
pub mod hardware;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod simulator;
