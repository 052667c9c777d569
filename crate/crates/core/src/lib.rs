//! Simulation and analysis toolkit for an LLM decode system that splits each
//! weight GeMV between an NPU and compute cores embedded in NAND flash dies.

pub mod config;
pub mod ecc;
pub mod engine;
pub mod hostmodel;
pub mod par;
pub mod tiler;
pub mod topology;
pub mod workload;

pub use config::{load_config, load_config_file, preset, Preset, SystemConfig};
