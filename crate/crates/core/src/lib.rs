//! Event-triggered networked MPC: condensed QPs, explicit regions, downlink
//! encodings and their exact cost accounting.
//!
//! The crate is `no_std` (with `alloc`); file formats, sockets and the CLI
//! live in the `etmpc-tools` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod costmodel;
pub mod library;
pub mod linalg;
pub mod netio;
pub mod problem;
pub mod protocol;
pub mod qp;
pub mod region;
pub mod sim;

pub use nalgebra;
