//! WebSocket session service and command-line front end.

pub mod cli;
pub mod protocol;
pub mod server;
