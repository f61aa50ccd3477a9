pub mod bernstein;
pub mod buttress;
pub mod cli;
pub mod data;
pub mod error;
pub mod matrix;
pub mod model;
pub mod reference;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
