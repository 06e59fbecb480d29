pub mod address;
pub mod bench;
pub mod crypto;
pub mod data_protocol;
pub mod error;
pub mod key_reference;
pub mod node;
mod onion;
pub mod routing_vector;
pub mod setup_protocol;
pub mod simnet;
pub mod vectors;
pub mod wire;

pub use address::Address;
pub use data_protocol::{DropReason, ProcessOutcome};
pub use error::{Error, Result};
