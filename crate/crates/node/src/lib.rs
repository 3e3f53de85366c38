//! Node runtime, HTTP plumbing and scenario drivers over `cogplant-core`.

pub mod client;
pub mod config;
pub mod httpd;
pub mod node;
pub mod scenario;
pub mod state;
