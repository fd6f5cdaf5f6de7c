//! Miniature diffusion transformer with per-token AdaLN modulation.

mod model;
mod sample;

pub use model::{adaln_modulate, Backbone, Condition, Injection};
pub use sample::{sample, sample_batch, SampleRequest};

use std::collections::BTreeMap;

use crate::embed::sinusoidal;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiTConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_mod: usize,
    /// Width of the frozen word vectors fed to the text projection.
    pub d_txt: usize,
    pub ff_hidden: usize,
    /// Sinusoidal width of the timestep features.
    pub d_time: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Text tokens per sequence; shorter prompts are padded.
    pub text_len: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            n_blocks: 6,
            d_model: 64,
            heads: 4,
            d_mod: 32,
            d_txt: 64,
            ff_hidden: 128,
            d_time: 64,
            image_size: 16,
            patch: 4,
            text_len: 12,
            t_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.t_steps < 2 {
            return bad("t_steps must be at least 2".into());
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!("beta schedule {}..{} invalid", self.beta_start, self.beta_end));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.d_time % 2 != 0 || self.d_model % 2 != 0 {
            return bad("sinusoidal widths must be even".into());
        }
        if self.text_len == 0 || self.d_mod == 0 || self.d_txt == 0 || self.ff_hidden == 0 {
            return bad("widths must be positive".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn seq_len(&self) -> usize {
        self.text_len + self.patches()
    }
}

/// Linear β schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "schedule T={t_steps} beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_config(c: &DiTConfig) -> Result<Self> {
        NoiseSchedule::linear(c.t_steps, c.beta_start, c.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, x0: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
    }
}

/// Sinusoidal features of a diffusion step, before the learned projection.
pub fn timestep_features(t: usize, t_steps: usize, d: usize) -> Result<Vec<f64>> {
    if t >= t_steps {
        return Err(Error::OutOfRange {
            what: "timestep",
            index: t,
            limit: t_steps,
        });
    }
    sinusoidal(t as f64, d)
}

/// Per-block modulation vectors of one sequence: a base `y_i` per block and
/// per-token overrides `y′_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationState {
    base: Vec<Tensor>,
    prompt_len: usize,
    overrides: BTreeMap<usize, Vec<Tensor>>,
}

impl ModulationState {
    /// Replicates `y = M_t(t_emb) + M(pooled prompt)` across `n_blocks`.
    pub fn base_modulation(
        time_term: &Tensor,
        prompt_term: &Tensor,
        n_blocks: usize,
        prompt_len: usize,
    ) -> Result<Self> {
        if time_term.shape() != prompt_term.shape() || time_term.rank() != 1 {
            return Err(Error::shape(
                "base_modulation",
                format!("{:?} + {:?}", time_term.shape(), prompt_term.shape()),
            ));
        }
        let y = Tensor::vector(
            time_term
                .data()
                .iter()
                .zip(prompt_term.data())
                .map(|(a, b)| a + b)
                .collect(),
        );
        Ok(ModulationState {
            base: vec![y; n_blocks],
            prompt_len,
            overrides: BTreeMap::new(),
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.base.len()
    }

    pub fn base(&self, block: usize) -> &Tensor {
        &self.base[block]
    }

    pub fn overrides(&self) -> &BTreeMap<usize, Vec<Tensor>> {
        &self.overrides
    }

    /// `y′_i = y_i + s·Δ_i` for every block at `token`.
    pub fn apply_concept_directions(&mut self, token: usize, directions: &Tensor, s: f64) -> Result<()> {
        if token >= self.prompt_len {
            return Err(Error::OutOfRange {
                what: "concept token",
                index: token,
                limit: self.prompt_len,
            });
        }
        let d = self.base[0].numel();
        if directions.shape() != [self.base.len(), d] {
            return Err(Error::shape(
                "apply_concept_directions",
                format!("expected [{}, {d}], got {:?}", self.base.len(), directions.shape()),
            ));
        }
        let rows = self
            .base
            .iter()
            .enumerate()
            .map(|(i, y)| {
                Tensor::vector(
                    y.data()
                        .iter()
                        .zip(directions.row(i))
                        .map(|(a, b)| a + s * b)
                        .collect(),
                )
            })
            .collect();
        self.overrides.insert(token, rows);
        Ok(())
    }

    /// Modulation vector of `token` in `block`.
    pub fn token_vector(&self, block: usize, token: usize) -> &Tensor {
        self.overrides
            .get(&token)
            .map(|v| &v[block])
            .unwrap_or(&self.base[block])
    }

    /// `[n_tokens, d_mod]` table of every token's vector in `block`.
    pub fn token_matrix(&self, block: usize, n_tokens: usize) -> Tensor {
        let d = self.base[block].numel();
        let mut data = Vec::with_capacity(n_tokens * d);
        for j in 0..n_tokens {
            data.extend_from_slice(self.token_vector(block, j).data());
        }
        Tensor::from_parts(vec![n_tokens, d], data)
    }
}
