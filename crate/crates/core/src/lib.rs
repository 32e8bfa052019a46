//! Jensen evidence lower bound policy optimization over small, exactly
//! enumerable token policies.

pub mod error;
pub mod estimators;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
