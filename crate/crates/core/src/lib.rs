pub mod assembly;
pub mod backend;
pub mod contam;
pub mod config;
pub mod corpus;
pub mod error;
pub mod hashing;
pub mod jsonl;
pub mod metrics;
pub mod mixing;
pub mod packing;
pub mod pipeline;
pub mod synthesis;
pub mod template;

pub use error::{Error, Result};
