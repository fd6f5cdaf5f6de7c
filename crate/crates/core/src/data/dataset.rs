//! Annotated sample sets and their MODK encoding.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{caption, render_scene, Category, SceneSpec, CAPTION_LEN, IMAGE_SIZE};
use crate::encoders::sub_seed;
use crate::error::{Error, Result};
use crate::modk::Container;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptAnnotation {
    pub category: Category,
    /// `p⁰`.
    pub concept_word: &'static str,
    /// Position of the concept word in the caption.
    pub token_index: usize,
    pub attribute_words: Vec<&'static str>,
}

impl ConceptAnnotation {
    /// `p⁺`: attribute words followed by the concept word.
    pub fn positive_prompt(&self) -> Vec<&'static str> {
        let mut p = self.attribute_words.clone();
        p.push(self.concept_word);
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub spec: SceneSpec,
    /// Grain seed passed to the renderer.
    pub seed: u64,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    pub caption: Vec<&'static str>,
    pub concepts: Vec<ConceptAnnotation>,
}

impl ToySample {
    pub fn from_spec(spec: SceneSpec, seed: u64) -> Self {
        let prompt = caption(&spec);
        let concepts = prompt
            .concepts
            .iter()
            .map(|&(category, token_index)| ConceptAnnotation {
                category,
                concept_word: category.concept_word(&spec),
                token_index,
                attribute_words: vec![category.attribute_word(&spec)],
            })
            .collect();
        ToySample {
            spec,
            seed,
            image: render_scene(&spec, seed),
            caption: prompt.words,
            concepts,
        }
    }

    pub fn concept(&self, category: Category) -> &ConceptAnnotation {
        self.concepts
            .iter()
            .find(|a| a.category == category)
            .expect("every caption annotates all categories")
    }
}

/// Sample `index` of the stream seeded by `seed`.
pub fn sample_at(seed: u64, index: u64) -> ToySample {
    let s = sub_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    ToySample::from_spec(SceneSpec::random(&mut rng), s)
}

pub fn generate(n: usize, seed: u64) -> Vec<ToySample> {
    (0..n as u64).map(|i| sample_at(seed, i)).collect()
}

pub fn to_container(samples: &[ToySample]) -> Container {
    let n = samples.len();
    let mut c = Container::new();
    c.put_u64("count", &[n as u64]);
    c.put_u64("seeds", &samples.iter().map(|s| s.seed).collect::<Vec<_>>());
    let codes: Vec<u32> = samples.iter().flat_map(|s| s.spec.to_codes()).collect();
    c.put_u32("specs", &codes);
    let pixels: Vec<f64> = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    c.put_tensor(
        "images",
        &Tensor::from_parts(vec![n, IMAGE_SIZE, IMAGE_SIZE, 3], pixels),
    );
    let captions: Vec<String> = samples.iter().map(|s| s.caption.join(" ")).collect();
    c.put_text("captions", &captions.join("\n"));
    let tokens: Vec<u32> = samples
        .iter()
        .flat_map(|s| s.concepts.iter().map(|a| a.token_index as u32))
        .collect();
    c.put_u32("concept_tokens", &tokens);
    c
}

pub fn from_container(c: &Container) -> Result<Vec<ToySample>> {
    let n = *c
        .u64s("count")?
        .first()
        .ok_or_else(|| Error::Format("empty count section".into()))? as usize;
    let seeds = c.u64s("seeds")?;
    let codes = c.u32s("specs")?;
    let images = c.tensor("images")?;
    let captions = c.text("captions")?;
    let tokens = c.u32s("concept_tokens")?;
    let per_image = IMAGE_SIZE * IMAGE_SIZE * 3;
    let ncat = Category::ALL.len();
    if seeds.len() != n || codes.len() != 6 * n || images.numel() != n * per_image || tokens.len() != ncat * n {
        return Err(Error::Format(format!("dataset sections disagree with count {n}")));
    }
    let caption_lines: Vec<&str> = if n == 0 { Vec::new() } else { captions.split('\n').collect() };
    if caption_lines.len() != n {
        return Err(Error::Format("caption count mismatch".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let spec = SceneSpec::from_codes(&codes[6 * i..6 * i + 6])?;
        let mut s = ToySample::from_spec(spec, seeds[i]);
        // Stored pixels are authoritative; captions and annotations must agree
        // with what the spec derives.
        s.image = Tensor::from_parts(
            vec![IMAGE_SIZE, IMAGE_SIZE, 3],
            images.data()[i * per_image..(i + 1) * per_image].to_vec(),
        );
        if caption_lines[i] != s.caption.join(" ") || s.caption.len() != CAPTION_LEN {
            return Err(Error::Format(format!("sample {i}: caption does not match its spec")));
        }
        for (k, a) in s.concepts.iter().enumerate() {
            if tokens[ncat * i + k] as usize != a.token_index {
                return Err(Error::Format(format!("sample {i}: concept token mismatch")));
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_dataset(samples: &[ToySample], path: &Path) -> Result<()> {
    to_container(samples).write(path)
}

pub fn read_dataset(path: &Path) -> Result<Vec<ToySample>> {
    from_container(&Container::read(path)?)
}

/// Generates `n` samples and writes them to `path`.
pub fn gen_dataset(n: usize, seed: u64, path: &Path) -> Result<Vec<ToySample>> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    let samples = generate(n, seed);
    write_dataset(&samples, path)?;
    Ok(samples)
}
