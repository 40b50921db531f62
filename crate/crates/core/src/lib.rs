//! Downlink CSI prediction from uplink CSI in FDD massive MIMO, with
//! no-transfer, direct-transfer and meta-learning training schemes.

pub mod channel;
pub mod error;
pub mod gradcheck;
pub mod eval;
mod gemm;
pub mod net;
pub mod optim;
pub mod rng;
pub mod store;
pub mod transfer;

pub use error::{Error, Result};
