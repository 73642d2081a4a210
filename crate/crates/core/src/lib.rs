//! QDBFT protocol core: ring-based primary rotation, simulated QKD key
//! pools, per-receiver tag authentication, the ledger, and the consensus
//! node state machine.
//!
//! Nothing in this crate performs I/O or reads a clock. Nodes consume
//! inputs and return effects; `qdbft-simnet` drives them in virtual time.

pub mod auth;
pub mod consensus;
pub mod ledger;
pub mod qkd;
pub mod ring;
pub mod wire;

pub use auth::{digest, ClientId, Digest};
pub use ring::NodeId;
