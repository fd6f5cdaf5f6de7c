//! Predicts per-block modulation directions for a concept from its image
//! and concept word.

mod kmeans;
mod model;

pub use kmeans::{kmeans, nearest, KMeans, RoutingTable, MAX_ITERS};
pub use model::{AdapterConfig, AdapterOutput, ConceptInput, ModAdapter, Variant};
