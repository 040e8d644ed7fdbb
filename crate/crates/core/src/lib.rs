pub mod deep;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod qed;
pub mod shallow;
pub mod special;

pub use error::{QepError, Result};
