pub mod cloud;
pub mod engine;
pub mod error;
pub mod eval;
pub mod ffd;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod selftest;
pub mod splat;
pub mod warp;

pub use error::{Error, Result};
