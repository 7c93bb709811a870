//! Deterministic simulator and analysis toolkit for OCT-guided autonomous
//! vascular anastomosis.

pub mod bus;
pub mod config;
pub mod console;
pub mod controller;
pub mod devices;
pub mod metrics;
pub mod oct;
pub mod rng;
pub mod synth;
pub mod vision;
