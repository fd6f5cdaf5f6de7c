//! Finite-difference verification of every differentiable primitive and of
//! the two end-to-end training paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterConfig, ConceptInput, ModAdapter, RoutingTable};
use crate::data::dataset::sample_at;
use crate::data::scene::Category;
use crate::dit::{Backbone, DiTConfig};
use crate::encoders::{EncoderConfig, Encoders, Vocabulary};
use crate::error::Result;
use crate::gradcheck::{grad_check, Coverage};
use crate::graph::{Graph, Var};
use crate::params::Bound;
use crate::tensor::Tensor;
use crate::train::adapter::{feature_loss, ConceptExample};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const END_TO_END_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> Result<Var>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| g.scale(v[0], -1.7)),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
        ("mul_rows", vec![vec![3, 4], vec![3]], |g, v| g.mul_rows(v[0], v[1])),
        ("silu", vec![vec![3, 4]], |g, v| g.silu(v[0])),
        ("layer_norm", vec![vec![3, 6]], |g, v| g.layer_norm(v[0], 1e-5)),
        ("softmax_last", vec![vec![3, 5]], |g, v| g.softmax(v[0], 1)),
        ("softmax_first", vec![vec![3, 5]], |g, v| g.softmax(v[0], 0)),
        ("sum", vec![vec![3, 4]], |g, v| g.sum(v[0])),
        ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("sum_sq", vec![vec![3, 4]], |g, v| g.sum_sq(v[0])),
        ("sq_err_sum", vec![vec![3, 4], vec![3, 4]], |g, v| g.sq_err_sum(v[0], v[1])),
        ("mse", vec![vec![3, 4], vec![3, 4]], |g, v| g.mse(v[0], v[1])),
        ("attention", vec![vec![6, 4], vec![8, 4], vec![8, 4]], |g, v| g.attention(v[0], v[1], v[2], 2, 2)),
        ("slice_cols", vec![vec![3, 6]], |g, v| g.slice_cols(v[0], 2, 3)),
        ("gather_rows", vec![vec![4, 3]], |g, v| g.gather_rows(v[0], &[3, 0, 0, 2, 1])),
        ("scatter_add_rows", vec![vec![4, 3], vec![2, 3]], |g, v| g.scatter_add_rows(v[0], v[1], &[2, 2])),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        ("gather_elems", vec![vec![3, 3]], |g, v| g.gather_elems(v[0], &[0, 4, 8, 4])),
        ("reshape", vec![vec![3, 4]], |g, v| g.reshape(v[0], &[2, 6])),
    ]
}

/// Scalarizes `out` with a fixed random projection.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = Tensor::randn(g.shape(out), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

pub fn primitive_checks(seeds: &[u64]) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (name, shapes, op) in primitive_cases() {
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 97 + 1);
            let params: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let err = grad_check(
                |g: &mut Graph, v: &[Var]| {
                    let o = op(g, v)?;
                    project(g, o, seed)
                },
                &params,
                1e-5,
                Coverage::All,
            )?;
            out.push(GradReport {
                name,
                seed,
                max_rel_err: err,
                tol: PRIMITIVE_TOL,
            });
        }
    }
    Ok(out)
}

/// Adapter forward into the feature-matching loss, every adapter parameter
/// sampled.
pub fn adapter_check(seed: u64) -> Result<GradReport> {
    let enc = Encoders::new(EncoderConfig::default(), Vocabulary::default_words());
    let words: Vec<(String, Tensor)> = ["circle", "square", "triangle", "cross", "texture", "tone", "light"]
        .iter()
        .map(|w| Ok((w.to_string(), enc.neutral_feature(w)?)))
        .collect::<Result<_>>()?;
    let routing = RoutingTable::fit(&words, 4, seed)?;
    let ad = ModAdapter::new(AdapterConfig::default(), seed)?;
    let batch: Vec<ConceptExample> = (0..2)
        .map(|i| ConceptExample::new(&enc, &routing, &sample_at(seed, i), Category::ALL[(seed + i) as usize % 4], seed + i))
        .collect::<Result<_>>()?;
    let inputs: Vec<ConceptInput> = batch.iter().map(|e| e.input.clone()).collect();
    let targets: Vec<&Tensor> = batch.iter().map(|e| &e.target).collect();
    let n = ad.config.n_queries;
    let err = grad_check(
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let out = ad.forward(g, &p, &inputs)?;
            feature_loss(g, out.features, &targets, n)
        },
        ad.params.tensors(),
        1e-6,
        Coverage::Sample { per_tensor: 3, seed },
    )?;
    Ok(GradReport {
        name: "adapter_feature_loss",
        seed,
        max_rel_err: err,
        tol: END_TO_END_TOL,
    })
}

/// One backbone block into a squared-error loss against random noise,
/// block parameters and the modulation rows checked.
pub fn dit_block_check(seed: u64) -> Result<GradReport> {
    let cfg = DiTConfig::default();
    let bb = Backbone::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 2 * cfg.seq_len();
    let x = Tensor::randn(&[rows, cfg.d_model], 1.0, &mut rng);
    let y = Tensor::randn(&[rows, cfg.d_mod], 0.5, &mut rng);
    let eps = Tensor::randn(&[rows, cfg.d_model], 1.0, &mut rng);
    let n = bb.params.len();
    let mut params = bb.params.tensors().to_vec();
    params.push(y);
    let err = grad_check(
        |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let xv = g.constant(x.clone());
            let out = bb.block_only(g, &p, 0, xv, v[n], 2)?;
            let t = g.constant(eps.clone());
            g.mse(out, t)
        },
        &params,
        1e-6,
        Coverage::Sample { per_tensor: 3, seed },
    )?;
    Ok(GradReport {
        name: "dit_block_diffusion_loss",
        seed,
        max_rel_err: err,
        tol: END_TO_END_TOL,
    })
}

pub fn end_to_end_checks(seeds: &[u64]) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.push(adapter_check(s)?);
        out.push(dit_block_check(s)?);
    }
    Ok(out)
}

/// Every check at three seeds.
pub fn gradient_suite() -> Result<Vec<GradReport>> {
    let seeds = [0, 1, 2];
    let mut r = primitive_checks(&seeds)?;
    r.extend(end_to_end_checks(&seeds)?);
    Ok(r)
}
