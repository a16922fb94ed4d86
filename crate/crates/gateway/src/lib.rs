//! Front door of the generator: wire protocol, streaming server, config and CLI.

pub mod cli;
pub mod config;
pub mod protocol;
pub mod server;

pub use protocol::{WireMessage, MAX_PAYLOAD};
