pub mod atlas;
pub mod chatdata;
pub mod engine;
pub mod error;
pub mod lora;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
