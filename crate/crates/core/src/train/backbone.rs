//! Backbone pre-training on captioned scenes.
//!
//! Besides full captions the backbone sees prompts with some attribute
//! words dropped. A dropped attribute is carried as the modulation offset
//! `M(emb(attribute))` on its concept token in every block, which teaches
//! the backbone to read per-token modulation. With `p_carry < 1` some
//! dropped attributes are left out entirely, which teaches their marginal
//! but also lets attribute correlations of the training set override the
//! injected offset.

use rand::Rng;

use super::diffusion::{conditions, noise_batch};
use super::stage::TrainStage;
use crate::data::dataset::ToySample;
use crate::data::scene::{prompt_without, Category};
use crate::dit::{Backbone, Injection, NoiseSchedule};
use crate::encoders::Encoders;
use crate::error::Result;
use crate::graph::Graph;
use crate::optim::OptimState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneAugment {
    /// Per-category probability that the attribute word is dropped.
    pub p_drop: f64,
    /// Probability that a dropped attribute is carried on its concept token.
    pub p_carry: f64,
}

impl Default for BackboneAugment {
    fn default() -> Self {
        BackboneAugment {
            p_drop: 0.5,
            p_carry: 1.0,
        }
    }
}

/// `[n_blocks, d_mod]` rows all equal to `M(emb(words))`.
pub fn oracle_directions(enc: &Encoders, words: &[&str], n_blocks: usize) -> Result<Tensor> {
    let f = enc.prompt_feature(words)?;
    Tensor::new(vec![n_blocks, f.numel()], f.data().repeat(n_blocks))
}

/// One AdamW step of the noise-prediction loss over `batch`.
#[allow(clippy::too_many_arguments)]
pub fn backbone_step<R: Rng + ?Sized>(
    backbone: &mut Backbone,
    opt: &mut OptimState,
    enc: &Encoders,
    sched: &NoiseSchedule,
    batch: &[&ToySample],
    augment: BackboneAugment,
    stage: TrainStage,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    stage.require(TrainStage::Backbone)?;
    let c = backbone.config.clone();
    let mut prompts = Vec::with_capacity(batch.len());
    let mut carried: Vec<(usize, usize, Tensor)> = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        let drop: Vec<Category> = Category::ALL
            .into_iter()
            .filter(|_| rng.random_bool(augment.p_drop))
            .collect();
        let prompt = prompt_without(&s.spec, &drop);
        for &cat in &drop {
            if rng.random_bool(augment.p_carry) {
                let dirs = oracle_directions(enc, &[cat.attribute_word(&s.spec)], c.n_blocks)?;
                carried.push((b, prompt.token_of(cat).expect("all concepts present"), dirs));
            }
        }
        prompts.push(prompt.words);
    }
    let conds = conditions(enc, &prompts, c.text_len)?;
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let nb = noise_batch(&c, sched, &images, rng)?;

    let mut g = Graph::new();
    let p = backbone.bind(&mut g, true);
    let x = g.constant(nb.x_t);
    let inj: Vec<Injection> = carried
        .into_iter()
        .map(|(sample, token, d)| Injection {
            sample,
            token,
            directions: g.constant(d),
        })
        .collect();
    let cref: Vec<_> = conds.iter().collect();
    let out = backbone.forward(&mut g, &p, x, &nb.t, &cref, &inj, 1.0)?;
    let target = g.constant(nb.eps);
    let loss = g.mse(out, target)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads = p.gradients(&mut grads, &backbone.params);
    opt.step_with_lr(&mut backbone.params, &grads, lr)?;
    Ok(value)
}
