//! Scoring of generated images.

pub mod bench;
pub mod probe;

pub use bench::{evaluate, is_held_out, training_set, AdapterSource, Bench, BenchCase, DirectionSource, Metrics};
pub use probe::{probe_attribute, probe_image, ProbeReport};
