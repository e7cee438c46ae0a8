pub mod cli;
pub mod config;
pub mod data;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod wire;
