//! Meta-learned high-order predictor for few-shot personalized preference
//! regression.

pub mod episodes;
pub mod error;
pub mod eval;
pub mod meta;
pub mod models;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};
