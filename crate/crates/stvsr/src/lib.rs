//! File formats, configuration, training driver and command-line tool
//! around `stvsr-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod png_seq;
pub mod report;
pub mod rvid;
