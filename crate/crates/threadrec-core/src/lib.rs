//! Training and evaluation engine for sequential recommendation with
//! evolving-preference decomposition.
//!
//! A reinforcement-learning item allocator splits each user's behavior
//! sequence into preference threads; per-thread recurrent encoders are pooled
//! to predict the next item. The crate bundles the pieces needed to train and
//! verify the method at desk scale: a reverse-mode autodiff tape, time-aware
//! GRU encoders, the allocation MDP with its reward schedule, ranking metrics,
//! data ingestion, and a synthetic generator that plants ground-truth threads.

pub mod allocator;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rewards;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
