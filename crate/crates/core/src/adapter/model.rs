use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::kmeans::RoutingTable;
use crate::embed::sinusoidal_pe;
use crate::encoders::{keyed_rng, Encoders};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

/// Architecture and training variants compared in the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Same architecture as `Full`, trained without the feature-matching stage.
    NoPretrain,
    /// Learned query tokens instead of word-derived queries.
    NoVlAttn,
    /// One wide MLP in place of the expert bank, matched in parameter count.
    NoMoe,
    /// Experts picked by a learned linear gate instead of the routing table.
    LinearGating,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPretrain,
        Variant::NoVlAttn,
        Variant::NoMoe,
        Variant::LinearGating,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPretrain => "no_pretrain",
            Variant::NoVlAttn => "no_vl_attn",
            Variant::NoMoe => "no_moe",
            Variant::LinearGating => "linear_gating",
        }
    }

    pub fn pretrains(self) -> bool {
        self != Variant::NoPretrain
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    /// Adapter blocks.
    pub n_layers: usize,
    pub n_experts: usize,
    /// Backbone block count; one query and one direction per block.
    pub n_queries: usize,
    pub d_mod: usize,
    pub d_img: usize,
    pub expert_hidden: usize,
    pub variant: Variant,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            n_layers: 2,
            n_experts: 4,
            n_queries: 6,
            d_mod: 32,
            d_img: 48,
            expert_hidden: 64,
            variant: Variant::Full,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_experts == 0 || self.n_queries == 0 {
            return Err(Error::Invalid("adapter counts must be at least 1".into()));
        }
        if self.d_mod % 2 != 0 || self.d_mod == 0 || self.d_img == 0 || self.expert_hidden == 0 {
            return Err(Error::Invalid("adapter widths must be positive, d_mod even".into()));
        }
        Ok(())
    }

    /// Hidden width of the single MLP that matches the expert bank's
    /// parameter count.
    pub fn dense_hidden(&self) -> usize {
        let d = self.d_mod;
        let per_expert = 2 * d * self.expert_hidden + self.expert_hidden + d;
        (self.n_experts * per_expert - d) / (2 * d + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng>(p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            w: p.randn(format!("{name}.w"), &[fan_in, fan_out], std, rng),
            b: p.zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.w))?;
        g.add_row(h, p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.apply(g, p, x)?;
        let h = g.silu(h)?;
        self.l2.apply(g, p, h)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: Linear,
    experts: Vec<Mlp>,
    gate: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Layout {
    /// Neutral-to-query projection, or learned query tokens without VL attention.
    query: ParamId,
    layers: Vec<Layer>,
    head: Linear,
}

/// One concept for the adapter: frozen image tokens, the neutral feature of
/// its concept word and the routed expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptInput {
    pub word: String,
    /// `[patches, d_img]`.
    pub image_tokens: Tensor,
    /// `M(emb(p⁰))`.
    pub neutral: Tensor,
    /// Routing-table expert (ignored under learned gating).
    pub expert: usize,
}

impl ConceptInput {
    pub fn new(enc: &Encoders, routing: &RoutingTable, image: &Tensor, word: &str) -> Result<Self> {
        let neutral = enc.neutral_feature(word)?;
        let expert = routing.route(neutral.data());
        Ok(ConceptInput {
            word: word.to_string(),
            image_tokens: enc.image.encode_image_patches(image)?,
            neutral,
            expert,
        })
    }
}

/// Graph handles produced by one adapter forward.
#[derive(Clone, Debug)]
pub struct AdapterOutput {
    /// `F⁺`, `[B·N, d_mod]`, concept-major.
    pub features: Var,
    /// `Δ = F⁺ − neutral`, same layout.
    pub directions: Var,
    /// Expert picked per concept and layer, `[B][n_layers]`.
    pub experts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct ModAdapter {
    pub config: AdapterConfig,
    pub params: ParamStore,
    layout: Layout,
    /// `[N, d_mod]` sinusoidal query position embeddings.
    pe: Tensor,
}

impl ModAdapter {
    pub fn new(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_mod;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut rng = keyed_rng(&format!("adapter-{}", c.variant), seed);
        let mut p = ParamStore::new();
        let query = if c.variant == Variant::NoVlAttn {
            p.randn("query.tokens", &[c.n_queries, d], 1.0, &mut rng)
        } else {
            p.randn("query.w", &[d, d], inv(d), &mut rng)
        };
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let q = p.randn(format!("layer{l}.q"), &[d, d], inv(d), &mut rng);
            let k = p.randn(format!("layer{l}.k"), &[c.d_img, d], inv(c.d_img), &mut rng);
            let v = p.randn(format!("layer{l}.v"), &[c.d_img, d], inv(c.d_img), &mut rng);
            let o = Linear::new(&mut p, &format!("layer{l}.o"), d, d, 0.5 * inv(d), &mut rng);
            let (count, hidden) = match c.variant {
                Variant::NoMoe => (1, c.dense_hidden()),
                _ => (c.n_experts, c.expert_hidden),
            };
            let experts = (0..count)
                .map(|e| Mlp {
                    l1: Linear::new(&mut p, &format!("layer{l}.expert{e}.l1"), d, hidden, inv(d), &mut rng),
                    l2: Linear::new(&mut p, &format!("layer{l}.expert{e}.l2"), hidden, d, 0.02, &mut rng),
                })
                .collect();
            let gate = (c.variant == Variant::LinearGating)
                .then(|| p.randn(format!("layer{l}.gate"), &[d, c.n_experts], inv(d), &mut rng));
            layers.push(Layer {
                q,
                k,
                v,
                o,
                experts,
                gate,
            });
        }
        let head = Linear::new(&mut p, "head", d, d, inv(d), &mut rng);
        let mut pe = Vec::with_capacity(c.n_queries * d);
        for i in 0..c.n_queries {
            pe.extend(sinusoidal_pe(i, c.n_queries, d)?);
        }
        Ok(ModAdapter {
            pe: Tensor::from_parts(vec![c.n_queries, d], pe),
            config,
            params: p,
            layout: Layout { query, layers, head },
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// `Q_i = neutral·W_q + pe(i)` for every concept, `[B·N, d_mod]`.
    /// `with_pe = false` drops the position term.
    pub fn build_queries(&self, g: &mut Graph, p: &Bound, neutrals: &[&Tensor], with_pe: bool) -> Result<Var> {
        let c = &self.config;
        let (n, d) = (c.n_queries, c.d_mod);
        let b = neutrals.len();
        let q = if c.variant == Variant::NoVlAttn {
            let idx: Vec<usize> = (0..b * n).map(|r| r % n).collect();
            g.gather_rows(p.var(self.layout.query), &idx)?
        } else {
            let mut rows = Vec::with_capacity(b * d);
            for t in neutrals {
                if t.numel() != d {
                    return Err(Error::shape("build_queries", format!("neutral width {} vs {d}", t.numel())));
                }
                rows.extend_from_slice(t.data());
            }
            let x = g.constant(Tensor::from_parts(vec![b, d], rows));
            let proj = g.matmul(x, p.var(self.layout.query))?;
            let idx: Vec<usize> = (0..b * n).map(|r| r / n).collect();
            g.gather_rows(proj, &idx)?
        };
        if !with_pe {
            return Ok(q);
        }
        let pe = g.constant(Tensor::from_parts(vec![b * n, d], self.pe.data().repeat(b)));
        g.add(q, pe)
    }

    /// Residual pre-LN cross-attention from the queries `x` (`[B·N, d_mod]`)
    /// onto each concept's image tokens (`[B·P, d_img]`).
    pub fn vl_cross_attention(&self, g: &mut Graph, p: &Bound, layer: usize, x: Var, image: Var, bsz: usize) -> Result<Var> {
        let l = &self.layout.layers[layer];
        let h = g.layer_norm(x, LN_EPS)?;
        let q = g.matmul(h, p.var(l.q))?;
        let k = g.matmul(image, p.var(l.k))?;
        let v = g.matmul(image, p.var(l.v))?;
        let a = g.attention(q, k, v, bsz, 1)?;
        let a = l.o.apply(g, p, a)?;
        g.add(x, a)
    }

    /// Residual pre-LN expert sub-layer with hard top-1 routing per concept.
    /// Returns the new rows and the expert used for each concept.
    pub fn moe_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        layer: usize,
        x: Var,
        routed: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let c = &self.config;
        let n = c.n_queries;
        let l = &self.layout.layers[layer];
        let bsz = routed.len();
        let h = g.layer_norm(x, LN_EPS)?;
        if l.experts.len() == 1 {
            let y = l.experts[0].apply(g, p, h)?;
            return Ok((g.add(x, y)?, vec![0; bsz]));
        }
        let mut probs = None;
        let choice: Vec<usize> = match l.gate {
            Some(gw) => {
                // Gate on each concept's mean query state.
                let mut avg = Vec::with_capacity(bsz * bsz * n);
                for b in 0..bsz {
                    for r in 0..bsz * n {
                        avg.push(if r / n == b { 1.0 / n as f64 } else { 0.0 });
                    }
                }
                let avg = g.constant(Tensor::from_parts(vec![bsz, bsz * n], avg));
                let pooled = g.matmul(avg, h)?;
                let logits = g.matmul(pooled, p.var(gw))?;
                let pr = g.softmax(logits, 1)?;
                let v = g.value(pr);
                let ch = (0..bsz)
                    .map(|b| {
                        let row = v.row(b);
                        let mut best = 0;
                        for e in 1..row.len() {
                            if row[e] > row[best] {
                                best = e;
                            }
                        }
                        best
                    })
                    .collect();
                probs = Some(pr);
                ch
            }
            None => routed.to_vec(),
        };
        let mut out = x;
        for (e, expert) in l.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..bsz).filter(|&b| choice[b] == e).flat_map(|b| b * n..(b + 1) * n).collect();
            if rows.is_empty() {
                continue;
            }
            let he = g.gather_rows(h, &rows)?;
            let mut y = expert.apply(g, p, he)?;
            if let Some(pr) = probs {
                // Scale by the gate probability so the gate receives gradient.
                let idx: Vec<usize> = rows.iter().map(|r| (r / n) * c.n_experts + e).collect();
                let w = g.gather_elems(pr, &idx)?;
                y = g.mul_rows(y, w)?;
            }
            out = g.scatter_add_rows(out, y, &rows)?;
        }
        if choice.iter().any(|&e| e >= l.experts.len()) {
            return Err(Error::OutOfRange {
                what: "expert",
                index: *choice.iter().max().unwrap(),
                limit: l.experts.len(),
            });
        }
        Ok((out, choice))
    }

    /// `F⁺` and `Δ = F⁺ − neutral` for a batch of concepts.
    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &[ConceptInput]) -> Result<AdapterOutput> {
        let c = &self.config;
        let (n, d) = (c.n_queries, c.d_mod);
        let bsz = inputs.len();
        if bsz == 0 {
            return Err(Error::Invalid("adapter batch is empty".into()));
        }
        let patches = inputs[0].image_tokens.rows();
        let mut img = Vec::with_capacity(bsz * patches * c.d_img);
        for inp in inputs {
            if inp.image_tokens.shape() != [patches, c.d_img] {
                return Err(Error::shape(
                    "adapter",
                    format!("image tokens {:?}, expected [{patches}, {}]", inp.image_tokens.shape(), c.d_img),
                ));
            }
            if inp.expert >= c.n_experts {
                return Err(Error::OutOfRange {
                    what: "expert",
                    index: inp.expert,
                    limit: c.n_experts,
                });
            }
            img.extend_from_slice(inp.image_tokens.data());
        }
        let image = g.constant(Tensor::from_parts(vec![bsz * patches, c.d_img], img));
        let neutrals: Vec<&Tensor> = inputs.iter().map(|i| &i.neutral).collect();
        let mut x = self.build_queries(g, p, &neutrals, true)?;
        let routed: Vec<usize> = inputs.iter().map(|i| i.expert).collect();
        let mut experts = vec![Vec::with_capacity(c.n_layers); bsz];
        for layer in 0..c.n_layers {
            x = self.vl_cross_attention(g, p, layer, x, image, bsz)?;
            let (nx, used) = self.moe_forward(g, p, layer, x, &routed)?;
            x = nx;
            for (b, e) in used.into_iter().enumerate() {
                experts[b].push(e);
            }
        }
        let h = g.layer_norm(x, LN_EPS)?;
        let features = self.layout.head.apply(g, p, h)?;
        let mut nrows = Vec::with_capacity(bsz * n * d);
        for t in &neutrals {
            for _ in 0..n {
                nrows.extend_from_slice(t.data());
            }
        }
        let nv = g.constant(Tensor::from_parts(vec![bsz * n, d], nrows));
        let directions = g.sub(features, nv)?;
        Ok(AdapterOutput {
            features,
            directions,
            experts,
        })
    }

    /// Plain-value `(F⁺, Δ)` for one concept, each `[N, d_mod]`.
    pub fn predict_directions(&self, input: &ConceptInput) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, std::slice::from_ref(input))?;
        Ok((g.value(out.features).clone(), g.value(out.directions).clone()))
    }

    /// Parameters of one expert, for gradient inspection.
    pub fn expert_params(&self, layer: usize, expert: usize) -> Vec<ParamId> {
        let m = &self.layout.layers[layer].experts[expert];
        vec![m.l1.w, m.l1.b, m.l2.w, m.l2.b]
    }

    /// Output head `(w, b)`.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.layout.head.w, self.layout.head.b)
    }
}
