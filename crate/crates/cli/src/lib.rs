//! Command-line front end: `run`, `bench`, `forge` and `report`.

pub mod commands;
pub mod config;
