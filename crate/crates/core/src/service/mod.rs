//! Live feedback over TCP with length-prefixed JSON messages.

pub mod protocol;
mod server;

pub use protocol::{
    ClientBody, ClientMessage, ErrorCode, ServerBody, ServerMessage, SessionSummary, TemplateInfo,
    PROTOCOL_VERSION,
};
pub use server::{Client, Server, ServerConfig, ServerHandle, ServiceState};
