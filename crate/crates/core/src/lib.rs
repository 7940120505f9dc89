pub mod adapter;
pub mod atlas;
pub mod axes;
pub mod error;
pub mod harness;
pub mod rng;
pub mod signal;
pub mod stats;
pub mod steermodel;
pub mod synthgen;
