//! Records, checkpoints, mask artifacts, configuration and run directories.

pub mod checkpoint;
pub mod config;
pub mod mask_io;
pub mod records;
pub mod run_dir;
