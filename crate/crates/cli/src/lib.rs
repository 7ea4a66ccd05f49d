//! Command-line pipeline: corpus generation, metric and classifier
//! training, adversarial training, translation and evaluation.

pub mod artifacts;
pub mod checkpoint;
pub mod commands;
pub mod config;
