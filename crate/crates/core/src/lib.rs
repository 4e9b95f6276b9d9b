//! Persistent block-sparse attention (PBSA) with a bounded KV memory, an
//! autoregressive diffusion rollout driver, and a CPU benchmark harness.

pub mod attention;
pub mod bench;
pub mod blockify;
pub mod cli;
pub mod error;
pub mod memory;
pub mod rollout;
pub mod router;
pub mod tensor;
pub mod verify;

pub use error::{Error, FormatError, Result};
