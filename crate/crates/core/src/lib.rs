//! Discrete-event simulator of a Tendermint-style BFT consensus protocol under
//! a logical clock, with adversarial delay control and trace analysis.
pub mod adversary;
pub mod analysis;
pub mod config;
pub mod engine;
pub mod rotation;
pub mod services;
pub mod sim;
pub mod timer;
pub mod types;
pub mod wal;
