//! Semi-supervised clustering for imbalanced new-class discovery over fixed
//! sentence embeddings.

pub mod data;
pub mod error;
pub mod eval;
pub mod filter;
pub mod learner;
pub mod longtail;
pub mod pipeline;
pub mod rot;
pub mod synthetic;
