//! Frozen stand-ins for the text encoder, the image encoder and the
//! prompt-to-modulation mapping `M`.
//!
//! Word vectors are drawn from a generator seeded by a stable hash of the
//! word, and prompts pool by plain summation. Together with a zero-bias
//! linear `M` this makes modulation-space differences of prompts exactly
//! additive: `M(emb(p⁺)) − M(emb(p⁰)) = M(emb(p⁺ \ p⁰))`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_plain, Tensor};

pub const DEFAULT_VOCAB: &str = include_str!("../assets/vocab.txt");

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of a stream seeded by `seed`.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Generator for a named frozen component under the global seed.
pub fn keyed_rng(key: &str, global_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()) ^ splitmix(global_seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if w.is_empty() {
                continue;
            }
            if w.contains(char::is_whitespace) {
                return Err(Error::Invalid(format!("vocabulary entry {w:?} contains whitespace")));
            }
            if v.index.contains_key(&w) {
                return Err(Error::Invalid(format!("duplicate vocabulary word {w:?}")));
            }
            v.index.insert(w.clone(), v.words.len());
            v.words.push(w);
        }
        Ok(v)
    }

    /// One word per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Vocabulary::new(text.lines())
    }

    pub fn default_words() -> Self {
        Vocabulary::parse(DEFAULT_VOCAB).expect("shipped vocabulary is valid")
    }

    pub fn index_of(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_txt: usize,
    pub d_img: usize,
    pub d_mod: usize,
    pub patch: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_txt: 64,
            d_img: 48,
            d_mod: 32,
            patch: 4,
            seed: 0,
        }
    }
}

/// Per-word frozen vectors with standard deviation `1/√d_txt` per entry.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    vocab: Vocabulary,
    dim: usize,
    seed: u64,
    table: Vec<Tensor>,
}

impl TextEncoder {
    pub fn new(vocab: Vocabulary, dim: usize, seed: u64) -> Self {
        let table = vocab
            .words()
            .iter()
            .map(|w| word_vector(w, dim, seed))
            .collect();
        TextEncoder {
            vocab,
            dim,
            seed,
            table,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry standard deviation of the word generator.
    pub fn sigma(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode_word(&self, word: &str) -> Result<&Tensor> {
        Ok(&self.table[self.vocab.index_of(word)?])
    }

    /// Sum of the word vectors; the empty prompt pools to zero.
    pub fn encode_prompt_pooled<S: AsRef<str>>(&self, prompt: &[S]) -> Result<Tensor> {
        let mut acc = vec![0.0; self.dim];
        for w in prompt {
            let v = self.encode_word(w.as_ref())?;
            acc.iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
        }
        Ok(Tensor::vector(acc))
    }
}

/// Pure function of `(word, global seed)`.
pub fn word_vector(word: &str, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ splitmix(seed));
    Tensor::randn(&[dim], 1.0 / (dim as f64).sqrt(), &mut rng)
}

/// Patchwise linear projection of pixels, no bias.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    patch: usize,
    proj: Tensor,
}

impl ImageEncoder {
    pub fn new(patch: usize, d_img: usize, seed: u64) -> Self {
        let fan_in = patch * patch * 3;
        let mut rng = keyed_rng("image-encoder", seed);
        ImageEncoder {
            patch,
            proj: Tensor::randn(&[fan_in, d_img], 1.0 / (fan_in as f64).sqrt(), &mut rng),
        }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.proj.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.proj
    }

    /// `[H, W, 3]` image to `[(H/p)·(W/p), d_img]` tokens.
    pub fn encode_image_patches(&self, image: &Tensor) -> Result<Tensor> {
        let patches = patchify(image, self.patch)?;
        matmul_plain(&patches, &self.proj)
    }
}

/// Splits an `[H, W, C]` image into row-major patches flattened as
/// `(dy, dx, c)`: output `[(H/p)·(W/p), p·p·C]`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || p == 0 || s[0] % p != 0 || s[1] % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("image {s:?} is not divisible into {p}x{p} patches"),
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / p, w / p);
    let d = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let row = (py * p + dy) * w + px * p;
                out.extend_from_slice(&d[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64], h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    if patches.len() != h * w * c || h % p != 0 || w % p != 0 {
        return Err(Error::shape("unpatchify", format!("{} values for {h}x{w}x{c}", patches.len())));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; h * w * c];
    let mut k = 0;
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let row = (py * p + dy) * w + px * p;
                out[row * c..(row + p) * c].copy_from_slice(&patches[k..k + p * c]);
                k += p * c;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// The frozen linear map `M: d_txt → d_mod` with zero bias.
#[derive(Clone, Debug)]
pub struct MappingLayer {
    weight: Tensor,
}

impl MappingLayer {
    pub fn new(d_txt: usize, d_mod: usize, seed: u64) -> Self {
        let mut rng = keyed_rng("mapping-layer", seed);
        MappingLayer {
            weight: Tensor::randn(&[d_txt, d_mod], 1.0 / (d_txt as f64).sqrt(), &mut rng),
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weight
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn map_to_modspace(&self, v: &Tensor) -> Result<Tensor> {
        if v.numel() != self.in_dim() {
            return Err(Error::shape(
                "map_to_modspace",
                format!("expected width {}, got {}", self.in_dim(), v.numel()),
            ));
        }
        let row = v.clone().reshape(&[1, self.in_dim()])?;
        matmul_plain(&row, &self.weight)?.reshape(&[self.out_dim()])
    }
}

/// All frozen encoders built from one config.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub mapping: MappingLayer,
}

impl Encoders {
    pub fn new(config: EncoderConfig, vocab: Vocabulary) -> Self {
        Encoders {
            config,
            text: TextEncoder::new(vocab, config.d_txt, config.seed),
            image: ImageEncoder::new(config.patch, config.d_img, config.seed),
            mapping: MappingLayer::new(config.d_txt, config.d_mod, config.seed),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.text.vocab()
    }

    /// `M(emb(prompt))`.
    pub fn prompt_feature<S: AsRef<str>>(&self, prompt: &[S]) -> Result<Tensor> {
        self.mapping.map_to_modspace(&self.text.encode_prompt_pooled(prompt)?)
    }

    /// `M(emb(p⁰))` for a bare concept word.
    pub fn neutral_feature(&self, concept_word: &str) -> Result<Tensor> {
        self.prompt_feature(&[concept_word])
    }

    /// SHA-256 over every frozen buffer.
    pub fn content_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.text.table.iter().chain([&self.image.proj, &self.mapping.weight]) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
