pub mod advisor;
pub mod dataset;
pub mod detect;
pub mod engine;
pub mod model;
pub mod rng;
pub mod search;
pub mod strategies;
