//! Noised batches for the diffusion objective.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dit::{Condition, DiTConfig, NoiseSchedule};
use crate::encoders::patchify;
use crate::error::Result;
use crate::tensor::Tensor;

/// Clean images, their noised versions and the noise, all patchified and
/// stacked as `[B·patches, patch_dim]`.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub t: Vec<usize>,
    pub x_t: Tensor,
    pub eps: Tensor,
}

/// Maps `[0, 1]` pixels to the model's `[−1, 1]` range and patchifies.
pub fn image_to_model(image: &Tensor, patch: usize) -> Result<Tensor> {
    let scaled = Tensor::new(image.shape().to_vec(), image.data().iter().map(|v| 2.0 * v - 1.0).collect())?;
    patchify(&scaled, patch)
}

pub fn noise_batch<R: Rng + ?Sized>(
    config: &DiTConfig,
    sched: &NoiseSchedule,
    images: &[&Tensor],
    rng: &mut R,
) -> Result<NoisedBatch> {
    let per = config.patches() * config.patch_dim();
    let mut t = Vec::with_capacity(images.len());
    let mut x_t = Vec::with_capacity(images.len() * per);
    let mut eps = Vec::with_capacity(images.len() * per);
    for img in images {
        let x0 = image_to_model(img, config.patch)?;
        let ti = rng.random_range(0..config.t_steps);
        let e: Vec<f64> = (0..per).map(|_| StandardNormal.sample(rng)).collect();
        x_t.extend(sched.add_noise(x0.data(), &e, ti));
        eps.extend(e);
        t.push(ti);
    }
    let shape = vec![images.len() * config.patches(), config.patch_dim()];
    Ok(NoisedBatch {
        t,
        x_t: Tensor::new(shape.clone(), x_t)?,
        eps: Tensor::new(shape, eps)?,
    })
}

/// Conditions for a batch of prompts.
pub fn conditions<S: AsRef<str>>(
    enc: &crate::encoders::Encoders,
    prompts: &[Vec<S>],
    text_len: usize,
) -> Result<Vec<Condition>> {
    prompts.iter().map(|p| Condition::new(enc, p, text_len)).collect()
}
