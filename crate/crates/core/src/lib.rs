pub mod cp;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod soft_cp;
pub mod stats;
pub mod tasks;
pub mod train;

pub use data::{Episode, Sample};
pub use error::{Error, Result};
