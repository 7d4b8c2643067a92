pub mod config;
pub mod container;
pub mod error;
pub mod files;
pub mod pipeline;
pub mod cli;
