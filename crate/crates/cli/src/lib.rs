//! Config-driven experiment runner for the multi-expert learning-to-defer
//! toolkit: parsing/validation, the experiment bodies, named presets, and
//! the plot-ready report writers behind the `l2d` binary.

pub mod config;
pub mod experiments;
pub mod presets;
pub mod report;
