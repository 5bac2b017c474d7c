pub mod cli;
pub mod controller;
pub mod cost;
pub mod diffcheck;
pub mod dynamics;
pub mod error;
pub mod gradsuite;
pub mod lanegeo;
pub mod planner;
pub mod predictor;
pub mod scenario;
pub mod simulator;
pub mod stack;
pub mod training;

pub use error::{Error, Result};
