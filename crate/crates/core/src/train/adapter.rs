//! Adapter stages: feature matching in modulation space, then the diffusion
//! objective through the frozen backbone with one injected concept per
//! sample.

use rand::Rng;

use super::diffusion::{conditions, noise_batch};
use super::stage::TrainStage;
use crate::adapter::{ConceptInput, ModAdapter, RoutingTable};
use crate::data::dataset::ToySample;
use crate::data::scene::{concept_exemplar, prompt_without, render_scene, Category};
use crate::dit::{Backbone, Injection, NoiseSchedule};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::OptimState;
use crate::params::Bound;
use crate::tensor::Tensor;

/// One concept of one training scene, as the adapter sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptExample {
    pub category: Category,
    pub input: ConceptInput,
    /// `M(emb(p⁺))`, `[d_mod]`.
    pub target: Tensor,
}

impl ConceptExample {
    /// The concept image is a fresh scene that shares only `category`'s
    /// attribute with `sample`, rendered from `exemplar_seed`.
    pub fn new(
        enc: &Encoders,
        routing: &RoutingTable,
        sample: &ToySample,
        category: Category,
        exemplar_seed: u64,
    ) -> Result<Self> {
        let spec = concept_exemplar(&sample.spec, category, exemplar_seed);
        let image = render_scene(&spec, exemplar_seed);
        let ann = sample.concept(category);
        Ok(ConceptExample {
            category,
            input: ConceptInput::new(enc, routing, &image, ann.concept_word)?,
            target: enc.prompt_feature(&ann.positive_prompt())?,
        })
    }
}

/// `(1/B) Σ_b (1/N) Σ_i ‖F⁺_i − M(emb(p⁺))‖²` for features `[B·N, d_mod]`.
pub fn feature_loss(g: &mut Graph, features: Var, targets: &[&Tensor], n_queries: usize) -> Result<Var> {
    let d = g.shape(features)[1];
    if g.shape(features)[0] != targets.len() * n_queries {
        return Err(Error::shape(
            "feature_loss",
            format!("{} rows for {} targets × {n_queries}", g.shape(features)[0], targets.len()),
        ));
    }
    let mut rows = Vec::with_capacity(targets.len() * n_queries * d);
    for t in targets {
        if t.numel() != d {
            return Err(Error::shape("feature_loss", format!("target width {} vs {d}", t.numel())));
        }
        for _ in 0..n_queries {
            rows.extend_from_slice(t.data());
        }
    }
    let tv = g.constant(Tensor::from_parts(vec![targets.len() * n_queries, d], rows));
    let s = g.sq_err_sum(features, tv)?;
    g.scale(s, 1.0 / (targets.len() * n_queries) as f64)
}

pub fn pretrain_loss(g: &mut Graph, adapter: &ModAdapter, p: &Bound, batch: &[ConceptExample]) -> Result<Var> {
    let inputs: Vec<ConceptInput> = batch.iter().map(|e| e.input.clone()).collect();
    let out = adapter.forward(g, p, &inputs)?;
    let targets: Vec<&Tensor> = batch.iter().map(|e| &e.target).collect();
    feature_loss(g, out.features, &targets, adapter.config.n_queries)
}

/// Held-out feature loss without a step.
pub fn pretrain_eval(adapter: &ModAdapter, batch: &[ConceptExample]) -> Result<f64> {
    let mut g = Graph::new();
    let p = adapter.bind(&mut g, false);
    let l = pretrain_loss(&mut g, adapter, &p, batch)?;
    Ok(g.value(l).data()[0])
}

/// One AdamW step on the feature loss. The backbone is not involved.
pub fn pretrain_step(
    adapter: &mut ModAdapter,
    opt: &mut OptimState,
    batch: &[ConceptExample],
    stage: TrainStage,
    lr: f64,
) -> Result<f64> {
    stage.require(TrainStage::AdapterPretrain)?;
    let mut g = Graph::new();
    let p = adapter.bind(&mut g, true);
    let loss = pretrain_loss(&mut g, adapter, &p, batch)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads = p.gradients(&mut grads, &adapter.params);
    opt.step_with_lr(&mut adapter.params, &grads, lr)?;
    Ok(value)
}

/// Loss and gradients of one adapter diffusion step.
#[derive(Clone, Debug)]
pub struct AdapterGrads {
    pub loss: f64,
    /// Store order of the adapter.
    pub adapter: Vec<Tensor>,
    /// Store order of the backbone; all zero since it is bound frozen.
    pub backbone: Vec<Tensor>,
    /// The single concept injected per sample.
    pub categories: Vec<Category>,
    /// Experts used per sample and adapter layer.
    pub experts: Vec<Vec<usize>>,
}

/// Picks one concept per sample uniformly, drops its attribute word from
/// the prompt, injects the adapter's directions at its concept token and
/// scores the backbone's noise prediction.
#[allow(clippy::too_many_arguments)]
pub fn adapter_diffusion_grads<R: Rng + ?Sized>(
    backbone: &Backbone,
    adapter: &ModAdapter,
    enc: &Encoders,
    routing: &RoutingTable,
    sched: &NoiseSchedule,
    batch: &[&ToySample],
    s: f64,
    rng: &mut R,
) -> Result<AdapterGrads> {
    let c = &backbone.config;
    let n = adapter.config.n_queries;
    if n != c.n_blocks {
        return Err(Error::Invalid(format!("adapter has {n} queries, backbone {} blocks", c.n_blocks)));
    }
    let mut prompts = Vec::with_capacity(batch.len());
    let mut tokens = Vec::with_capacity(batch.len());
    let mut inputs = Vec::with_capacity(batch.len());
    let mut categories = Vec::with_capacity(batch.len());
    for smp in batch {
        let cat = Category::ALL[rng.random_range(0..Category::ALL.len())];
        let prompt = prompt_without(&smp.spec, &[cat]);
        tokens.push(prompt.token_of(cat).expect("all concepts present"));
        prompts.push(prompt.words);
        inputs.push(ConceptExample::new(enc, routing, smp, cat, rng.random())?.input);
        categories.push(cat);
    }
    let conds = conditions(enc, &prompts, c.text_len)?;
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let nb = noise_batch(c, sched, &images, rng)?;

    let mut g = Graph::new();
    let pb = backbone.bind(&mut g, false);
    let pa = adapter.bind(&mut g, true);
    let out = adapter.forward(&mut g, &pa, &inputs)?;
    let mut inj = Vec::with_capacity(batch.len());
    for (b, &token) in tokens.iter().enumerate() {
        let rows: Vec<usize> = (b * n..(b + 1) * n).collect();
        inj.push(Injection {
            sample: b,
            token,
            directions: g.gather_rows(out.directions, &rows)?,
        });
    }
    let x = g.constant(nb.x_t);
    let cref: Vec<_> = conds.iter().collect();
    let eps = backbone.forward(&mut g, &pb, x, &nb.t, &cref, &inj, s)?;
    let target = g.constant(nb.eps);
    let loss = g.mse(eps, target)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    Ok(AdapterGrads {
        loss: value,
        adapter: pa.gradients(&mut grads, &adapter.params),
        backbone: pb.gradients(&mut grads, &backbone.params),
        categories,
        experts: out.experts,
    })
}

/// One AdamW step of the adapter on the diffusion objective; only the
/// adapter's parameters are updated.
#[allow(clippy::too_many_arguments)]
pub fn adapter_train_step<R: Rng + ?Sized>(
    backbone: &Backbone,
    adapter: &mut ModAdapter,
    opt: &mut OptimState,
    enc: &Encoders,
    routing: &RoutingTable,
    sched: &NoiseSchedule,
    batch: &[&ToySample],
    stage: TrainStage,
    s: f64,
    lr: f64,
    rng: &mut R,
) -> Result<AdapterGrads> {
    stage.require(TrainStage::AdapterTrain)?;
    let out = adapter_diffusion_grads(backbone, adapter, enc, routing, sched, batch, s, rng)?;
    opt.step_with_lr(&mut adapter.params, &out.adapter, lr)?;
    Ok(out)
}
