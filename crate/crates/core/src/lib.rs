//! Joint exploration and tracking for teams of mobile robots.

pub mod agent;
pub mod error;
pub mod field;
pub mod gaussmix;
pub mod jet;
pub mod linalg;
pub mod planner_high;
pub mod planner_low;
pub mod sensor;
pub mod sim;
pub mod tracker;

pub use error::{Error, Result};
