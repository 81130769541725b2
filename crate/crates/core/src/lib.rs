pub mod autograd;
pub mod error;

pub use error::{Error, Result};
pub mod dsp;
pub mod mixer;
pub mod patcher;
pub mod model;
pub mod losses;
pub mod trainer;
pub mod eval;
pub mod polytools;
