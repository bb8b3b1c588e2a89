//! Standard-library side of etmpc: problem files, stream sockets, parallel
//! batches, CSV output and the acceptance checks behind `etmpc verify`.

pub mod batch;
pub mod output;
pub mod problem_file;
pub mod tcp;
pub mod verify;

pub use etmpc_core;
