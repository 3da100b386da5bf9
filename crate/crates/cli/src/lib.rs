//! Operator surface: dataset generation, training, calibration, evaluation,
//! sweeps, and the interactive session server.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod protocol;
pub mod server;
