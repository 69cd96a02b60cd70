//! Training-free architecture scoring and search built on the empirical
//! neural tangent kernel.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod model;
pub mod ntk;
pub mod par;
pub mod search;
pub mod space;
pub mod verify;

pub use error::{Error, Result};
