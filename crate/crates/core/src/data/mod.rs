//! Synthetic scene generation and the dataset container.

pub mod dataset;
pub mod scene;

pub use dataset::{gen_dataset, read_dataset, write_dataset, ConceptAnnotation, ToySample};
pub use scene::{
    attribute_caption, caption, concept_exemplar, prompt_without, render_scene, Category, Color, Light,
    ProbeCategory, Prompt, SceneSpec, Shape, Texture, Tone,
};
