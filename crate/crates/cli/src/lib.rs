//! Experiment orchestration and reporting on top of the core library:
//! config files, the staged experiment runner with manifest-driven resume,
//! and accuracy-vs-label-fraction plot emission.

pub mod config;
pub mod experiment;
pub mod plot;
