pub mod dynamics;
pub mod error;
pub mod features;
pub mod filter;
pub mod harness;
pub mod koopman;
pub mod numerics;
pub mod par;

pub use error::{Error, Result};
