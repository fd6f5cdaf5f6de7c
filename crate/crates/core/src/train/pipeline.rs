//! End-to-end drivers for the three stages, checkpoints and the ablation
//! harness.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use super::adapter::{adapter_train_step, pretrain_step, ConceptExample};
use super::backbone::{backbone_step, BackboneAugment};
use super::stage::{StagePlan, TrainStage};
use crate::adapter::{AdapterConfig, ConceptInput, ModAdapter, RoutingTable, Variant};
use crate::data::dataset::{sample_at, ToySample};
use crate::data::scene::{Category, Shape};
use crate::dit::{Backbone, DiTConfig, NoiseSchedule};
use crate::encoders::{keyed_rng, sub_seed, EncoderConfig, Encoders, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::bench::{evaluate, training_set, AdapterSource, Bench, Metrics};
use crate::graph::Graph;
use crate::modk::{write_atomic, Container};
use crate::optim::{AdamWConfig, OptimState};

/// Every knob of the three-stage protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub dit: DiTConfig,
    pub adapter: AdapterConfig,
    pub augment: BackboneAugment,
    /// Training scenes shared by every stage.
    pub train_samples: usize,
    pub backbone: StagePlan,
    pub pretrain: StagePlan,
    pub adapter_train: StagePlan,
    /// Modulation scale `s` for training and inference.
    pub scale: f64,
    pub sample_steps: usize,
    pub eval_cases: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            encoder: EncoderConfig::default(),
            dit: DiTConfig::default(),
            adapter: AdapterConfig::default(),
            augment: BackboneAugment::default(),
            train_samples: 4096,
            backbone: StagePlan::new(TrainStage::Backbone, 20_000, 16, 2e-3),
            pretrain: StagePlan::new(TrainStage::AdapterPretrain, 2000, 32, 1e-2),
            adapter_train: StagePlan::new(TrainStage::AdapterTrain, 5000, 16, 5e-4),
            scale: 1.0,
            sample_steps: 50,
            eval_cases: 64,
        }
    }
}

impl PipelineConfig {
    /// Checks that the modules agree on every shared width.
    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        self.adapter.validate()?;
        let (e, d, a) = (&self.encoder, &self.dit, &self.adapter);
        let checks = [
            ("d_mod", e.d_mod, d.d_mod),
            ("d_mod", e.d_mod, a.d_mod),
            ("d_txt", e.d_txt, d.d_txt),
            ("d_img", e.d_img, a.d_img),
            ("patch", e.patch, d.patch),
            ("n_queries vs n_blocks", a.n_queries, d.n_blocks),
        ];
        for (name, x, y) in checks {
            if x != y {
                return Err(Error::Invalid(format!("{name} mismatch: {x} vs {y}")));
            }
        }
        if d.image_size != crate::data::scene::IMAGE_SIZE {
            return Err(Error::Invalid(format!("image_size must be {}", crate::data::scene::IMAGE_SIZE)));
        }
        for plan in [&self.backbone, &self.pretrain, &self.adapter_train] {
            if plan.batch == 0 || !(plan.lr > 0.0) {
                return Err(Error::Invalid(format!("{}: batch and lr must be positive", plan.stage)));
            }
        }
        if self.train_samples == 0 || self.sample_steps == 0 || self.sample_steps > d.t_steps {
            return Err(Error::Invalid("train_samples and sample_steps out of range".into()));
        }
        Ok(())
    }

    pub fn encoders(&self) -> Encoders {
        Encoders::new(self.encoder.clone(), Vocabulary::default_words())
    }

    pub fn training_data(&self) -> Vec<ToySample> {
        training_set(self.train_samples, self.seed)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.adapter.variant = variant;
        c
    }
}

fn batch_of<'a, R: Rng + ?Sized>(data: &'a [ToySample], size: usize, rng: &mut R) -> Vec<&'a ToySample> {
    (0..size).map(|_| &data[rng.random_range(0..data.len())]).collect()
}

/// Trains a fresh backbone. `progress` sees `(step, loss)`.
pub fn train_backbone(
    cfg: &PipelineConfig,
    enc: &Encoders,
    data: &[ToySample],
    progress: &mut dyn FnMut(usize, f64),
) -> Result<Backbone> {
    cfg.validate()?;
    let plan = &cfg.backbone;
    let mut bb = Backbone::new(cfg.dit.clone(), cfg.seed)?;
    let mut opt = OptimState::new(AdamWConfig::default(), &bb.params);
    let sched = NoiseSchedule::from_config(&cfg.dit)?;
    let mut rng = keyed_rng("train-backbone", cfg.seed);
    for step in 0..plan.steps {
        let batch = batch_of(data, plan.batch, &mut rng);
        let l = backbone_step(
            &mut bb,
            &mut opt,
            enc,
            &sched,
            &batch,
            cfg.augment,
            plan.stage,
            plan.lr_at(step),
            &mut rng,
        )?;
        progress(step, l);
    }
    Ok(bb)
}

/// Concept words that occur in training captions.
pub fn training_concept_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = Shape::ALL.iter().map(|s| s.word()).collect();
    w.extend(["texture", "tone", "light"]);
    w
}

/// k-means routing over the neutral features of the training concept words.
pub fn fit_routing(enc: &Encoders, n_experts: usize, seed: u64) -> Result<RoutingTable> {
    let words = training_concept_words()
        .into_iter()
        .map(|w| Ok((w.to_string(), enc.neutral_feature(w)?)))
        .collect::<Result<Vec<_>>>()?;
    RoutingTable::fit(&words, n_experts, seed)
}

/// `n` examples with uniformly drawn samples and categories.
pub fn concept_examples(
    enc: &Encoders,
    routing: &RoutingTable,
    data: &[ToySample],
    n: usize,
    seed: u64,
) -> Result<Vec<ConceptExample>> {
    let mut rng = keyed_rng("concept-examples", seed);
    (0..n)
        .map(|_| {
            let s = &data[rng.random_range(0..data.len())];
            let cat = Category::ALL[rng.random_range(0..Category::ALL.len())];
            ConceptExample::new(enc, routing, s, cat, rng.random())
        })
        .collect()
}

/// Held-out scenes for the feature loss: a stream disjoint from training.
pub fn pretrain_holdout(enc: &Encoders, routing: &RoutingTable, n: usize, seed: u64) -> Result<Vec<ConceptExample>> {
    let data: Vec<ToySample> = (0..n as u64).map(|i| sample_at(seed ^ 0x5eed_0ff5, i)).collect();
    concept_examples(enc, routing, &data, n, seed ^ 0x5eed_0ff5)
}

/// Feature-matching stage over a fixed pool with one concept example per
/// scene of `data`. Returns the per-step losses.
pub fn pretrain_adapter(
    plan: &StagePlan,
    enc: &Encoders,
    routing: &RoutingTable,
    adapter: &mut ModAdapter,
    data: &[ToySample],
    seed: u64,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let pool = concept_examples(enc, routing, data, data.len(), seed)?;
    let mut opt = OptimState::new(AdamWConfig::default(), &adapter.params);
    let mut rng = keyed_rng("pretrain-adapter", seed);
    let mut losses = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let batch: Vec<ConceptExample> = (0..plan.batch)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        let l = pretrain_step(adapter, &mut opt, &batch, plan.stage, plan.lr_at(step))?;
        progress(step, l);
        losses.push(l);
    }
    Ok(losses)
}

/// Diffusion stage with the backbone frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter(
    plan: &StagePlan,
    scale: f64,
    backbone: &Backbone,
    enc: &Encoders,
    routing: &RoutingTable,
    adapter: &mut ModAdapter,
    data: &[ToySample],
    seed: u64,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<()> {
    let sched = NoiseSchedule::from_config(&backbone.config)?;
    let mut opt = OptimState::new(AdamWConfig::default(), &adapter.params);
    let mut rng = keyed_rng("train-adapter", seed);
    for step in 0..plan.steps {
        let batch = batch_of(data, plan.batch, &mut rng);
        let out = adapter_train_step(
            backbone,
            adapter,
            &mut opt,
            enc,
            routing,
            &sched,
            &batch,
            plan.stage,
            scale,
            plan.lr_at(step),
            &mut rng,
        )?;
        progress(step, out.loss);
    }
    Ok(())
}

/// Expert picks over one pass of concept examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertUsage {
    /// `[layer][expert]` counts.
    pub counts: Vec<Vec<usize>>,
    /// Routing-table expert of each example, in order.
    pub routed: Vec<usize>,
}

impl ExpertUsage {
    pub fn shares(&self, layer: usize) -> Vec<f64> {
        let c = &self.counts[layer];
        let n = c.iter().sum::<usize>().max(1) as f64;
        c.iter().map(|&v| v as f64 / n).collect()
    }

    /// Smallest share over experts and layers.
    pub fn min_share(&self) -> f64 {
        (0..self.counts.len())
            .flat_map(|l| self.shares(l))
            .fold(f64::INFINITY, f64::min)
    }

    /// Shares implied by the routing table for the same examples.
    pub fn routed_shares(&self, n_experts: usize) -> Vec<f64> {
        let mut c = vec![0usize; n_experts];
        for &e in &self.routed {
            c[e] += 1;
        }
        let n = self.routed.len().max(1) as f64;
        c.iter().map(|&v| v as f64 / n).collect()
    }
}

/// Runs the adapter over every (training scene, category) pair once and
/// counts the expert each layer used.
pub fn expert_usage(
    enc: &Encoders,
    routing: &RoutingTable,
    adapter: &ModAdapter,
    data: &[ToySample],
    seed: u64,
) -> Result<ExpertUsage> {
    let layers = adapter.config.n_layers;
    let experts = adapter.config.n_experts;
    let mut counts = vec![vec![0; experts]; layers];
    let mut routed = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let inputs: Vec<ConceptInput> = Category::ALL
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let ex_seed = sub_seed(seed, (i * Category::ALL.len() + k) as u64);
                Ok(ConceptExample::new(enc, routing, s, c, ex_seed)?.input)
            })
            .collect::<Result<_>>()?;
        let mut g = Graph::new();
        let p = adapter.bind(&mut g, false);
        let out = adapter.forward(&mut g, &p, &inputs)?;
        for (inp, used) in inputs.iter().zip(&out.experts) {
            routed.push(inp.expert);
            for (l, &e) in used.iter().enumerate() {
                if e < experts {
                    counts[l][e] += 1;
                }
            }
        }
    }
    Ok(ExpertUsage { counts, routed })
}

/// A trained adapter with the routing it was trained under.
#[derive(Clone, Debug)]
pub struct TrainedAdapter {
    pub adapter: ModAdapter,
    pub routing: RoutingTable,
    pub pretrain_losses: Vec<f64>,
}

/// Adapter stages for one variant and seed: routing fit, feature matching
/// unless the variant skips it, then diffusion training.
pub fn train_variant(
    cfg: &PipelineConfig,
    variant: Variant,
    seed: u64,
    backbone: &Backbone,
    enc: &Encoders,
    data: &[ToySample],
    progress: &mut dyn FnMut(TrainStage, usize, f64),
) -> Result<TrainedAdapter> {
    let cfg = cfg.with_variant(variant);
    cfg.validate()?;
    let routing = fit_routing(enc, cfg.adapter.n_experts, cfg.seed)?;
    let mut adapter = ModAdapter::new(cfg.adapter.clone(), seed)?;
    let mut pretrain_losses = Vec::new();
    if variant.pretrains() {
        let pre_data = &data[..data.len().min(2000)];
        pretrain_losses = pretrain_adapter(&cfg.pretrain, enc, &routing, &mut adapter, pre_data, seed, &mut |s, l| {
            progress(TrainStage::AdapterPretrain, s, l)
        })?;
    }
    train_adapter(
        &cfg.adapter_train,
        cfg.scale,
        backbone,
        enc,
        &routing,
        &mut adapter,
        data,
        seed,
        &mut |s, l| progress(TrainStage::AdapterTrain, s, l),
    )?;
    Ok(TrainedAdapter {
        adapter,
        routing,
        pretrain_losses,
    })
}

/// Multi-concept bench used for ablations.
pub fn ablation_bench(cfg: &PipelineConfig, seed: u64) -> Bench {
    Bench::pairs(cfg.eval_cases, sub_seed(cfg.seed ^ 0xab1a_7e, seed))
}

pub fn evaluate_adapter(cfg: &PipelineConfig, backbone: &Backbone, enc: &Encoders, t: &TrainedAdapter, bench: &Bench, seed: u64) -> Result<Metrics> {
    let src = AdapterSource {
        adapter: &t.adapter,
        routing: &t.routing,
        enc,
    };
    evaluate(backbone, enc, Some(&src), bench, cfg.scale, cfg.sample_steps, seed)
}

/// Trains and evaluates `variant` once per seed under identical budgets.
pub fn run_ablation(
    variant: Variant,
    cfg: &PipelineConfig,
    backbone: &Backbone,
    enc: &Encoders,
    data: &[ToySample],
    seeds: &[u64],
    progress: &mut dyn FnMut(TrainStage, usize, f64),
) -> Result<Vec<Metrics>> {
    seeds
        .iter()
        .map(|&seed| {
            let t = train_variant(cfg, variant, seed, backbone, enc, data, progress)?;
            evaluate_adapter(cfg, backbone, enc, &t, &ablation_bench(cfg, seed), seed)
        })
        .collect()
}

pub const METRICS_CSV_HEADER: &str = "variant,seed,cp,pf,cp_pf,n_samples";

/// One row per `(label, metrics)`; the label is normally a variant name.
pub fn metrics_csv<S: AsRef<str>>(rows: &[(S, Metrics)]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for (v, m) in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", v.as_ref(), m.seed, m.cp, m.pf, m.cp_pf, m.n_samples);
    }
    s
}

pub fn write_metrics_csv<S: AsRef<str>>(path: &Path, rows: &[(S, Metrics)]) -> Result<()> {
    write_atomic(path, metrics_csv(rows).as_bytes())
}

fn kv(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_kv(text: &str) -> Result<HashMap<String, String>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad config entry {l:?}")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(m: &HashMap<String, String>, key: &str) -> Result<T> {
    m.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("missing or bad config field {key}")))
}

fn dit_kv(c: &DiTConfig) -> String {
    kv(&[
        ("n_blocks", c.n_blocks.to_string()),
        ("d_model", c.d_model.to_string()),
        ("heads", c.heads.to_string()),
        ("d_mod", c.d_mod.to_string()),
        ("d_txt", c.d_txt.to_string()),
        ("ff_hidden", c.ff_hidden.to_string()),
        ("d_time", c.d_time.to_string()),
        ("image_size", c.image_size.to_string()),
        ("patch", c.patch.to_string()),
        ("text_len", c.text_len.to_string()),
        ("t_steps", c.t_steps.to_string()),
        ("beta_start", c.beta_start.to_string()),
        ("beta_end", c.beta_end.to_string()),
    ])
}

fn dit_from_kv(m: &HashMap<String, String>) -> Result<DiTConfig> {
    Ok(DiTConfig {
        n_blocks: field(m, "n_blocks")?,
        d_model: field(m, "d_model")?,
        heads: field(m, "heads")?,
        d_mod: field(m, "d_mod")?,
        d_txt: field(m, "d_txt")?,
        ff_hidden: field(m, "ff_hidden")?,
        d_time: field(m, "d_time")?,
        image_size: field(m, "image_size")?,
        patch: field(m, "patch")?,
        text_len: field(m, "text_len")?,
        t_steps: field(m, "t_steps")?,
        beta_start: field(m, "beta_start")?,
        beta_end: field(m, "beta_end")?,
    })
}

fn adapter_kv(c: &AdapterConfig) -> String {
    kv(&[
        ("n_layers", c.n_layers.to_string()),
        ("n_experts", c.n_experts.to_string()),
        ("n_queries", c.n_queries.to_string()),
        ("d_mod", c.d_mod.to_string()),
        ("d_img", c.d_img.to_string()),
        ("expert_hidden", c.expert_hidden.to_string()),
        ("variant", c.variant.name().to_string()),
    ])
}

fn adapter_from_kv(m: &HashMap<String, String>) -> Result<AdapterConfig> {
    Ok(AdapterConfig {
        n_layers: field(m, "n_layers")?,
        n_experts: field(m, "n_experts")?,
        n_queries: field(m, "n_queries")?,
        d_mod: field(m, "d_mod")?,
        d_img: field(m, "d_img")?,
        expert_hidden: field(m, "expert_hidden")?,
        variant: m
            .get("variant")
            .ok_or_else(|| Error::Format("missing variant".into()))?
            .parse()?,
    })
}

fn store_params(c: &mut Container, prefix: &str, p: &crate::params::ParamStore) {
    for (name, t) in p.iter() {
        c.put_tensor(format!("{prefix}{name}"), t);
    }
}

fn load_params(c: &Container, prefix: &str, p: &mut crate::params::ParamStore) -> Result<()> {
    let entries: HashMap<String, _> = c.tensors_with_prefix(prefix)?.into_iter().collect();
    if entries.len() != p.len() {
        return Err(Error::Format(format!("{} stored tensors, model has {}", entries.len(), p.len())));
    }
    p.load_named(&entries, "")
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    let k = c.text("kind")?;
    if k != kind {
        return Err(Error::Format(format!("expected a {kind} checkpoint, found {k}")));
    }
    Ok(())
}

pub fn backbone_container(b: &Backbone) -> Container {
    let mut c = Container::new();
    c.put_text("kind", "backbone");
    c.put_text("config", &dit_kv(&b.config));
    store_params(&mut c, "param.", &b.params);
    c
}

pub fn backbone_from_container(c: &Container) -> Result<Backbone> {
    expect_kind(c, "backbone")?;
    let mut b = Backbone::new(dit_from_kv(&parse_kv(&c.text("config")?)?)?, 0)?;
    load_params(c, "param.", &mut b.params)?;
    Ok(b)
}

pub fn save_backbone(path: &Path, b: &Backbone) -> Result<()> {
    backbone_container(b).write(path)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    backbone_from_container(&Container::read(path)?)
}

pub fn adapter_container(t: &TrainedAdapter) -> Container {
    let mut c = Container::new();
    c.put_text("kind", "adapter");
    c.put_text("config", &adapter_kv(&t.adapter.config));
    t.routing.store(&mut c, "routing.");
    store_params(&mut c, "param.", &t.adapter.params);
    c.put_tensor(
        "pretrain_losses",
        &crate::tensor::Tensor::vector(t.pretrain_losses.clone()),
    );
    c
}

pub fn adapter_from_container(c: &Container) -> Result<TrainedAdapter> {
    expect_kind(c, "adapter")?;
    let mut adapter = ModAdapter::new(adapter_from_kv(&parse_kv(&c.text("config")?)?)?, 0)?;
    load_params(c, "param.", &mut adapter.params)?;
    Ok(TrainedAdapter {
        adapter,
        routing: RoutingTable::load(c, "routing.")?,
        pretrain_losses: c.tensor("pretrain_losses")?.into_data(),
    })
}

pub fn save_adapter(path: &Path, t: &TrainedAdapter) -> Result<()> {
    adapter_container(t).write(path)
}

pub fn load_adapter(path: &Path) -> Result<TrainedAdapter> {
    adapter_from_container(&Container::read(path)?)
}
