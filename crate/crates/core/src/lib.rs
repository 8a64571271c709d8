//! A small joint audio–video diffusion transformer that conditions on a
//! reference voice clip placed in-context, with negative rotary positions for
//! the reference, identity guidance at sampling time, and a synthetic identity
//! world whose generative factors are exactly recoverable.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod model;
pub mod numerics;
pub mod par;
pub mod positional;
pub mod rng;
pub mod synthworld;

pub use error::{Error, Result};
