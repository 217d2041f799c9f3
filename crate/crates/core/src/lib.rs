pub mod checkpoint;
pub mod data;
pub mod daug;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod style;
pub mod trainer;

pub use error::{DaugError, Result};
