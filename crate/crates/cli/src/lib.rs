//! Batch driver: configuration, runs and auxiliary tables.

pub mod config;
pub mod run;
pub mod tools;
