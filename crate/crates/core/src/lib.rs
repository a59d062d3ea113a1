pub mod config;
pub mod demo;
pub mod envs;
pub mod error;
pub mod human;
pub mod inference;
pub mod lq;
pub mod nn;
pub mod planner;
pub mod service;

pub use error::{Error, Result};
