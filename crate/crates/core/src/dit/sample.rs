use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{Backbone, Condition, Injection};
use super::NoiseSchedule;
use crate::encoders::{patchify, unpatchify};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// One image to draw: its prompt, concept injections `(token, Δ)` and noise
/// seed.
#[derive(Clone, Debug)]
pub struct SampleRequest<'a> {
    pub cond: &'a Condition,
    pub concepts: Vec<(usize, Tensor)>,
    pub seed: u64,
}

/// Evenly spaced steps from `T − 1` down to 0.
fn timesteps(t_steps: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![t_steps - 1];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|k| ((k * (t_steps - 1)) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Ancestral sampling with predicted-`x₀` clipping, batched over requests.
/// Pixels live in `[−1, 1]` inside the model; returned images are `[0, 1]`.
pub fn sample_batch(backbone: &Backbone, requests: &[SampleRequest], s: f64, steps: usize) -> Result<Vec<Tensor>> {
    let c = &backbone.config;
    if steps == 0 || steps > c.t_steps {
        return Err(Error::OutOfRange {
            what: "sampling steps",
            index: steps,
            limit: c.t_steps + 1,
        });
    }
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let sched = NoiseSchedule::from_config(c)?;
    let n = c.image_size * c.image_size * 3;
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut xs: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|rng| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let conds: Vec<&Condition> = requests.iter().map(|r| r.cond).collect();
    let ts = timesteps(c.t_steps, steps);
    for (k, &t) in ts.iter().enumerate() {
        let mut g = Graph::new();
        let p = backbone.bind(&mut g, false);
        let mut patches = Vec::with_capacity(requests.len() * n);
        for x in &xs {
            let img = Tensor::from_parts(vec![c.image_size, c.image_size, 3], x.clone());
            patches.extend(patchify(&img, c.patch)?.into_data());
        }
        let x_var = g.constant(Tensor::from_parts(
            vec![requests.len() * c.patches(), c.patch_dim()],
            patches,
        ));
        let mut inj = Vec::new();
        for (b, r) in requests.iter().enumerate() {
            for (token, dirs) in &r.concepts {
                inj.push(Injection {
                    sample: b,
                    token: *token,
                    directions: g.constant(dirs.clone()),
                });
            }
        }
        let tb = vec![t; requests.len()];
        let eps = backbone.forward(&mut g, &p, x_var, &tb, &conds, &inj, s)?;
        let eps = g.value(eps).data();

        let ab = sched.alpha_bars[t];
        let ab_prev = if k + 1 < ts.len() { sched.alpha_bars[ts[k + 1]] } else { 1.0 };
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt();
        let last = k + 1 == ts.len();
        for (b, x) in xs.iter_mut().enumerate() {
            let e = unpatchify(&eps[b * n..(b + 1) * n], c.image_size, c.image_size, 3, c.patch)?;
            for (xi, ei) in x.iter_mut().zip(e.data()) {
                let x0 = ((*xi - (1.0 - ab).sqrt() * ei) / ab.sqrt()).clamp(-1.0, 1.0);
                *xi = if last { x0 } else { c0 * x0 + ct * *xi };
            }
            if !last {
                for xi in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rngs[b]);
                    *xi += sigma * z;
                }
            }
        }
    }
    Ok(xs
        .into_iter()
        .map(|x| {
            let d = x.into_iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
            Tensor::from_parts(vec![c.image_size, c.image_size, 3], d)
        })
        .collect())
}

pub fn sample(
    backbone: &Backbone,
    cond: &Condition,
    concepts: &[(usize, Tensor)],
    s: f64,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let req = SampleRequest {
        cond,
        concepts: concepts.to_vec(),
        seed,
    };
    Ok(sample_batch(backbone, &[req], s, steps)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::timesteps;

    #[test]
    fn respaced_steps_cover_both_ends() {
        assert_eq!(timesteps(100, 100), (0..100).rev().collect::<Vec<_>>());
        assert_eq!(timesteps(100, 1), vec![99]);
        let t = timesteps(100, 25);
        assert_eq!((t[0], *t.last().unwrap(), t.len()), (99, 0, 25));
    }
}
