//! Finite-difference simulator for ternary diblock-copolymer solutions
//! with optional electric and magnetic field couplings, integrated by
//! linear second-order energy-stable schemes.

pub mod cli;
pub mod error;
pub mod fields;
pub mod harness;
pub mod integrators;
pub mod io;
pub mod grid;
pub mod model;
pub mod spectral;

pub use error::{Error, Result};
