//! Core state machines for a desk-scale cognitive plant stack.
//!
//! Everything in this crate is pure: entities, brokering, device decoding,
//! history aggregation, streaming detectors, edge sync, placement planning,
//! access control and usage control are all plain data plus functions from
//! (state, input, clock) to (state, effects). No IO, no wall clock, no
//! threads. The companion `cogplant` crate wires these machines to sockets,
//! files and a CLI.
//!
//! The crate is `no_std` + `alloc`; float math goes through [`mathx`] so the
//! same bit patterns come out on every build.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod agents;
pub mod auth;
pub mod broker;
pub mod glob;
pub mod hash;
pub mod history;
pub mod json;
pub mod mathx;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod sync;
pub mod time;
pub mod usage;

pub use model::{Attribute, Entity, EntityId, EntitySelector, Patch, Scalar};
pub use time::Timestamp;
