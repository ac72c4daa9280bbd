//! Files and command line for `hici-core`: TOML configs, the tensor and
//! checkpoint formats, result tables and the `hici` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod manifest;
pub mod tables;
pub mod tensor_io;
