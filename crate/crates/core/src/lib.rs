pub mod antenna;
pub mod channel;
pub mod config;
pub mod downlink;
pub mod error;
pub mod harness;
pub mod impairments;
pub mod modem;
pub mod numerics;
pub mod slot;
pub mod uplink;

pub use error::{Error, Result};
