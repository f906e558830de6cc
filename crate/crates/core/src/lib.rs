pub mod client;
pub mod data;
pub mod error;
pub mod expansion;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
