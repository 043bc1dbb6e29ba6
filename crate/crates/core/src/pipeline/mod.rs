//! Files, training loops, evaluation and the end-to-end experiment.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod experiment;
pub mod io;
pub mod plot;
pub mod schedule;
pub mod train;
