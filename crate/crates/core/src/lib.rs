pub mod autoencoder;
pub mod blackbox;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod ddpg;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};

/// Lowercase hexadecimal rendering of a byte string.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
