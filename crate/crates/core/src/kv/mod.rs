//! Memcached-style key-value service whose request parsing runs in guarded
//! domains, plus a blocking client for it.

pub mod client;
pub mod dataset;
pub mod protocol;
pub mod server;
pub mod store;

pub use client::{ClientError, KvClient};
pub use protocol::{KvCommand, ParseError, Verb};
pub use server::{serve, GuardMode, KvServer, ServerConfig, ServerError, ServerHandle, ServerStats};
pub use store::{Store, StoreState};
