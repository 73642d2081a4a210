//! The per-node consensus state machine, its messages, quorum arithmetic
//! and the client actor.

pub mod client;
pub mod messages;
pub mod node;
pub mod quorum;

pub use client::{Client, ClientConfig, ClientEvent};
pub use messages::{Auth, Body, Envelope, MessageKind, Reply};
pub use node::{
    Behavior, Command, DropCause, Effects, EventKind, Input, LogEvent, Node, NodeConfig, NodeSnapshot, OpCounts,
    Output, RoundPhase, Status, TimerKind,
};
