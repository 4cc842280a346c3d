//! Interpretable policy extraction on small gridworld tasks.

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod extract;
pub mod mdp;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
