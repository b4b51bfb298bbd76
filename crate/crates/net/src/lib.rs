//! Network side of the family cybersafety proxy: the intercepting proxy,
//! the IWP and back-end HTTP APIs, clients for them, and mock services.

pub mod api;
pub mod backend_api;
pub mod clients;
pub mod config;
pub mod extract;
pub mod heartbeat;
pub mod iwp;
pub mod mock;
pub mod proxy;
pub mod runtime;
pub mod server;
pub mod sync;
pub mod tls;
