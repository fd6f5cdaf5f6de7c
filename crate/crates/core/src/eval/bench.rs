//! Held-out personalization benchmark and its scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::probe::probe_image;
use crate::adapter::{ConceptInput, ModAdapter, RoutingTable};
use crate::data::dataset::{sample_at, ToySample};
use crate::data::scene::{prompt_without, render_scene, Category, ProbeCategory, Prompt, SceneSpec};
use crate::dit::{sample_batch, Backbone, Condition, SampleRequest};
use crate::encoders::{sub_seed, Encoders};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tone/texture pairs excluded from every training image: those whose
/// enumeration indices sum to a multiple of 4 (one pair per tone).
pub fn is_held_out(spec: &SceneSpec) -> bool {
    (spec.tone.index() + spec.texture.index()) % 4 == 0
}

/// The first `n` samples of the `seed` stream that avoid held-out pairs.
pub fn training_set(n: usize, seed: u64) -> Vec<ToySample> {
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        let s = sample_at(seed, i);
        if !is_held_out(&s.spec) {
            out.push(s);
        }
        i += 1;
    }
    out
}

/// One concept image to personalize with.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConcept {
    pub category: Category,
    /// Scene of the concept image; shares `category`'s attribute with the
    /// case target.
    pub spec: SceneSpec,
    pub render_seed: u64,
}

impl BenchConcept {
    pub fn image(&self) -> Tensor {
        render_scene(&self.spec, self.render_seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCase {
    /// The scene the personalized prompt should produce.
    pub target: SceneSpec,
    pub concepts: Vec<BenchConcept>,
    /// Sampler noise seed.
    pub seed: u64,
}

impl BenchCase {
    pub fn categories(&self) -> Vec<Category> {
        self.concepts.iter().map(|c| c.category).collect()
    }

    /// The target caption with every personalized attribute word removed.
    pub fn prompt(&self) -> Prompt {
        prompt_without(&self.target, &self.categories())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bench {
    pub cases: Vec<BenchCase>,
}

fn held_out_spec<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
    loop {
        let s = SceneSpec::random(rng);
        if is_held_out(&s) {
            return s;
        }
    }
}

fn make_case(categories: &[Category], seed: u64) -> BenchCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = held_out_spec(&mut rng);
    let concepts = categories
        .iter()
        .map(|&category| {
            let spec = held_out_spec(&mut rng).with_attribute(category, &target);
            BenchConcept {
                category,
                spec,
                render_seed: rng.random(),
            }
        })
        .collect();
    BenchCase {
        target,
        concepts,
        seed: rng.random(),
    }
}

impl Bench {
    /// `n` cases that each personalize every category in `categories`.
    /// Targets are held-out scenes.
    pub fn new(categories: &[Category], n: usize, seed: u64) -> Result<Self> {
        let mut seen = Vec::new();
        for c in categories {
            if seen.contains(c) {
                return Err(Error::Invalid(format!("category {} repeated", c.name())));
            }
            seen.push(*c);
        }
        Ok(Bench {
            cases: (0..n as u64).map(|i| make_case(categories, sub_seed(seed, i))).collect(),
        })
    }

    /// `n` cases with two distinct categories each, drawn uniformly.
    pub fn pairs(n: usize, seed: u64) -> Self {
        let cases = (0..n as u64)
            .map(|i| {
                let s = sub_seed(seed, i);
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e37_79b9);
                let a = rng.random_range(0..4);
                let b = (a + 1 + rng.random_range(0..3)) % 4;
                make_case(&[Category::ALL[a], Category::ALL[b]], s)
            })
            .collect();
        Bench { cases }
    }
}

/// Probe categories scored for concept preservation when `category` is
/// personalized.
pub fn preserved(category: Category) -> ProbeCategory {
    category.probe()
}

/// Probe categories named by the prompt and not personalized.
pub fn prompt_elements(personalized: &[Category]) -> Vec<ProbeCategory> {
    ProbeCategory::ALL
        .into_iter()
        .filter(|p| !personalized.iter().any(|c| c.probe() == *p))
        .collect()
}

/// Per-case probe outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseScore {
    /// `(category, matched)` for each personalized concept.
    pub concepts: Vec<(Category, bool)>,
    pub pf_hits: usize,
    pub pf_total: usize,
}

impl CaseScore {
    pub fn all_concepts(&self) -> bool {
        self.concepts.iter().all(|(_, ok)| *ok)
    }
}

pub fn score_case(image: &Tensor, case: &BenchCase) -> Result<CaseScore> {
    let report = probe_image(image)?;
    let concepts = case
        .concepts
        .iter()
        .map(|c| {
            let p = preserved(c.category);
            (c.category, report.word(p) == p.value_word(&c.spec))
        })
        .collect();
    let elems = prompt_elements(&case.categories());
    let pf_hits = elems
        .iter()
        .filter(|p| report.word(**p) == p.value_word(&case.target))
        .count();
    Ok(CaseScore {
        concepts,
        pf_hits,
        pf_total: elems.len(),
    })
}

/// Supplies `[n_blocks, d_mod]` directions for a concept image and word.
pub trait DirectionSource {
    fn directions(&self, image: &Tensor, word: &str) -> Result<Tensor>;
}

pub struct AdapterSource<'a> {
    pub adapter: &'a ModAdapter,
    pub routing: &'a RoutingTable,
    pub enc: &'a Encoders,
}

impl DirectionSource for AdapterSource<'_> {
    fn directions(&self, image: &Tensor, word: &str) -> Result<Tensor> {
        let input = ConceptInput::new(self.enc, self.routing, image, word)?;
        Ok(self.adapter.predict_directions(&input)?.1)
    }
}

/// Probe-based personalization scores over a bench.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Fraction of personalized concepts whose attribute matches the concept image.
    pub cp: f64,
    /// Fraction of non-personalized prompt elements realized.
    pub pf: f64,
    /// `cp × pf`.
    pub cp_pf: f64,
    /// Fraction of cases where every personalized concept matched.
    pub joint: f64,
    /// `(category, matched, total)`.
    pub per_concept: Vec<(Category, usize, usize)>,
    pub seed: u64,
    pub n_samples: usize,
}

impl Metrics {
    pub fn from_scores(scores: &[CaseScore], seed: u64) -> Self {
        let mut per: Vec<(Category, usize, usize)> = Category::ALL.iter().map(|&c| (c, 0, 0)).collect();
        let (mut pf_h, mut pf_t, mut joint) = (0, 0, 0);
        for s in scores {
            for &(cat, ok) in &s.concepts {
                let e = per.iter_mut().find(|e| e.0 == cat).expect("all categories listed");
                e.1 += ok as usize;
                e.2 += 1;
            }
            pf_h += s.pf_hits;
            pf_t += s.pf_total;
            joint += s.all_concepts() as usize;
        }
        per.retain(|e| e.2 > 0);
        let cp_h: usize = per.iter().map(|e| e.1).sum();
        let cp_t: usize = per.iter().map(|e| e.2).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (cp, pf) = (ratio(cp_h, cp_t), ratio(pf_h, pf_t));
        Metrics {
            cp,
            pf,
            cp_pf: cp * pf,
            joint: ratio(joint, scores.len()),
            per_concept: per,
            seed,
            n_samples: scores.len(),
        }
    }

    pub fn concept_accuracy(&self, category: Category) -> Option<f64> {
        self.per_concept
            .iter()
            .find(|e| e.0 == category)
            .map(|e| e.1 as f64 / e.2 as f64)
    }
}

/// Cases sampled per batched sampler call.
const EVAL_CHUNK: usize = 32;

/// Samples every case with the concepts injected at scale `s` (no injection
/// when `source` is `None`) and scores the images.
pub fn evaluate(
    backbone: &Backbone,
    enc: &Encoders,
    source: Option<&dyn DirectionSource>,
    bench: &Bench,
    s: f64,
    steps: usize,
    seed: u64,
) -> Result<Metrics> {
    Ok(Metrics::from_scores(&sample_bench(backbone, enc, source, bench, s, steps)?.1, seed))
}

/// Images and scores for every case, in case order.
pub fn sample_bench(
    backbone: &Backbone,
    enc: &Encoders,
    source: Option<&dyn DirectionSource>,
    bench: &Bench,
    s: f64,
    steps: usize,
) -> Result<(Vec<Tensor>, Vec<CaseScore>)> {
    let text_len = backbone.config.text_len;
    let mut images = Vec::with_capacity(bench.cases.len());
    let mut scores = Vec::with_capacity(bench.cases.len());
    for chunk in bench.cases.chunks(EVAL_CHUNK) {
        let mut conds = Vec::with_capacity(chunk.len());
        let mut concepts = Vec::with_capacity(chunk.len());
        for case in chunk {
            let prompt = case.prompt();
            conds.push(Condition::new(enc, &prompt.words, text_len)?);
            let mut inj = Vec::new();
            if let Some(src) = source {
                for c in &case.concepts {
                    let token = prompt.token_of(c.category).expect("all concepts present");
                    inj.push((token, src.directions(&c.image(), prompt.words[token])?));
                }
            }
            concepts.push(inj);
        }
        let reqs: Vec<SampleRequest> = chunk
            .iter()
            .zip(&conds)
            .zip(concepts)
            .map(|((case, cond), concepts)| SampleRequest {
                cond,
                concepts,
                seed: case.seed,
            })
            .collect();
        for (img, case) in sample_batch(backbone, &reqs, s, steps)?.into_iter().zip(chunk) {
            scores.push(score_case(&img, case)?);
            images.push(img);
        }
    }
    Ok((images, scores))
}
