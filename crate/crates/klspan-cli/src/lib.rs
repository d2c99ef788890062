//! Library surface of the experiment harness, shared by the `klspan`
//! binary and the acceptance test suite.

pub mod config;
pub mod runner;
pub mod verify;
