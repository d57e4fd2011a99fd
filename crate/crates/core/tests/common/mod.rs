//! Shared support for the integration tests: brute-force oracles, the
//! finite-difference gradient checker and the end-to-end experiments behind
//! the acceptance suite.

#![allow(dead_code)]

pub mod experiments;
pub mod gradcheck;
pub mod oracles;
