//! convoHER2: HER2 breast-cancer patch scoring from stained tissue images.
//!
//! The pipeline composes a frozen 2048-d feature backbone with a trainable
//! classifier head (four batch-norm + dense stages ending in a 4-way
//! softmax) and ships a from-scratch numerics oracle that cross-checks the
//! head's batch normalization, activations, loss, and gradients.

pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod model;
pub mod oracle;
pub mod preprocess;
pub mod reporting;
pub mod trainer;
pub mod verify;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
