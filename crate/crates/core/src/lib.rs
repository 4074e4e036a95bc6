pub mod adversarial;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod model;
pub mod probing;
pub mod tensor;

pub use error::{Error, Result};
