//! Point-cloud → language alignment stack at desk scale.
//!
//! The crate implements the full pipeline — frozen point encoder, projection
//! MLPs, query transformer with LoRA/norm PEFT, mixture of query experts,
//! byte-level causal LM — together with the four-stage training driver and
//! an exact parameter accountant for every module's budget.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod ledger;
pub mod lm;
pub mod model;
pub mod mqe;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pointcloud;
pub mod projectors;
pub mod qformer;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
