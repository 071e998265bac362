pub mod data;
pub mod diff;
pub mod harness;
pub mod model;
