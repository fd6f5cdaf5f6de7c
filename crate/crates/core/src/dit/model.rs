use rand::Rng;

use super::{timestep_features, DiTConfig};
use crate::embed::sinusoidal_pe;
use crate::encoders::{keyed_rng, patchify, unpatchify, Encoders};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD_WORD: &str = "pad";
const LN_EPS: f64 = 1e-6;

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
struct Block {
    attn_mod: Linear,
    qkv: Linear,
    out: Linear,
    ff_mod: Linear,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    text_in: Linear,
    img_in: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    final_out: Linear,
}

/// Frozen-word text embeddings and the mapped pooled prompt of one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    /// `[text_len, d_txt]`, padded with the pad word.
    pub text: Tensor,
    /// `M(emb(prompt))`, `[d_mod]`.
    pub pooled: Tensor,
    /// Unpadded prompt length.
    pub prompt_len: usize,
}

impl Condition {
    pub fn new<S: AsRef<str>>(enc: &Encoders, words: &[S], text_len: usize) -> Result<Self> {
        if words.len() > text_len {
            return Err(Error::Invalid(format!(
                "prompt has {} words, at most {text_len} allowed",
                words.len()
            )));
        }
        let d = enc.text.dim();
        let mut text = Vec::with_capacity(text_len * d);
        for w in words {
            text.extend_from_slice(enc.text.encode_word(w.as_ref())?.data());
        }
        let pad = enc.text.encode_word(PAD_WORD)?;
        for _ in words.len()..text_len {
            text.extend_from_slice(pad.data());
        }
        Ok(Condition {
            text: Tensor::from_parts(vec![text_len, d], text),
            pooled: enc.prompt_feature(words)?,
            prompt_len: words.len(),
        })
    }
}

/// A direction set injected at one text token of one batch element.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub sample: usize,
    pub token: usize,
    /// `[n_blocks, d_mod]`.
    pub directions: Var,
}

/// Per-token AdaLN: `gate ⊙ (scale ⊙ LN(x) + shift)` with `[scale, shift,
/// gate] = y·W + b` evaluated separately for every row of `y_tok`.
pub fn adaln_modulate(g: &mut Graph, x: Var, y_tok: Var, head_w: Var, head_b: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    let m = g.matmul(y_tok, head_w)?;
    let m = g.add_row(m, head_b)?;
    if g.shape(m)[1] != 3 * d || g.shape(m)[0] != g.shape(x)[0] {
        return Err(Error::shape(
            "adaln_modulate",
            format!("head output {:?} for tokens {:?}", g.shape(m), g.shape(x)),
        ));
    }
    let scale = g.slice_cols(m, 0, d)?;
    let shift = g.slice_cols(m, d, d)?;
    let gate = g.slice_cols(m, 2 * d, d)?;
    let h = g.layer_norm(x, LN_EPS)?;
    let h = g.mul(h, scale)?;
    let h = g.add(h, shift)?;
    g.mul(h, gate)
}

/// The backbone: weights plus the layout that names them.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: DiTConfig,
    pub params: ParamStore,
    layout: Layout,
    /// Fixed image-token position embeddings, `[patches, d_model]`.
    pos: Tensor,
}

impl Backbone {
    pub fn new(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = keyed_rng("backbone", seed);
        let mut p = ParamStore::new();
        let d = c.d_model;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let text_in = Linear::new(&mut p, "text_in", c.d_txt, d, inv(c.d_txt), &mut rng);
        let img_in = Linear::new(&mut p, "img_in", c.patch_dim(), d, inv(c.patch_dim()), &mut rng);
        let time1 = Linear::new(&mut p, "time1", c.d_time, d, inv(c.d_time), &mut rng);
        let time2 = Linear::new(&mut p, "time2", d, c.d_mod, inv(d), &mut rng);
        let mut blocks = Vec::with_capacity(c.n_blocks);
        for i in 0..c.n_blocks {
            let head = |name: &str, p: &mut ParamStore, rng: &mut _| {
                let l = Linear::new(p, &format!("block{i}.{name}"), c.d_mod, 3 * d, 0.1 * inv(c.d_mod), rng);
                // Identity modulation at init: scale 1, shift 0, gate 1.
                let b = p.get_mut(l.b).data_mut();
                b[..d].fill(1.0);
                b[2 * d..].fill(1.0);
                l
            };
            let attn_mod = head("attn_mod", &mut p, &mut rng);
            let qkv = Linear::new(&mut p, &format!("block{i}.qkv"), d, 3 * d, inv(d), &mut rng);
            let out = Linear::new(&mut p, &format!("block{i}.out"), d, d, 0.5 * inv(d), &mut rng);
            let ff_mod = head("ff_mod", &mut p, &mut rng);
            let ff1 = Linear::new(&mut p, &format!("block{i}.ff1"), d, c.ff_hidden, inv(d), &mut rng);
            let ff2 = Linear::new(&mut p, &format!("block{i}.ff2"), c.ff_hidden, d, 0.5 * inv(c.ff_hidden), &mut rng);
            blocks.push(Block {
                attn_mod,
                qkv,
                out,
                ff_mod,
                ff1,
                ff2,
            });
        }
        let final_mod = Linear::new(&mut p, "final_mod", c.d_mod, 2 * d, 0.1 * inv(c.d_mod), &mut rng);
        p.get_mut(final_mod.b).data_mut()[..d].fill(1.0);
        let final_out = Linear::new(&mut p, "final_out", d, c.patch_dim(), 0.1 * inv(d), &mut rng);
        let mut pos = Vec::with_capacity(c.patches() * d);
        for j in 0..c.patches() {
            pos.extend(sinusoidal_pe(j, c.patches(), d)?);
        }
        Ok(Backbone {
            pos: Tensor::from_parts(vec![c.patches(), d], pos),
            config,
            params: p,
            layout: Layout {
                text_in,
                img_in,
                time1,
                time2,
                blocks,
                final_mod,
                final_out,
            },
        })
    }

    /// Binds the weights onto `g`; `trainable = false` freezes them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// `M_t(t_emb)` for each step in `t`, `[B, d_mod]`.
    pub fn time_term(&self, g: &mut Graph, p: &Bound, t: &[usize]) -> Result<Var> {
        let c = &self.config;
        let mut feats = Vec::with_capacity(t.len() * c.d_time);
        for &ti in t {
            feats.extend(timestep_features(ti, c.t_steps, c.d_time)?);
        }
        let f = g.constant(Tensor::from_parts(vec![t.len(), c.d_time], feats));
        let h = self.layout.time1.apply(g, p, f)?;
        let h = g.silu(h)?;
        self.layout.time2.apply(g, p, h)
    }

    /// Plain-value `M_t(t_emb)` for one step.
    pub fn time_term_value(&self, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let v = self.time_term(&mut g, &p, &[t])?;
        g.value(v).clone().reshape(&[self.config.d_mod])
    }

    /// Predicted noise for a batch.
    ///
    /// `x_t` is `[B·patches, patch_dim]` (patchified, one sample after the
    /// other); the result has the same layout. Each injection adds
    /// `s·Δ_i` to the modulation vector of its token in block `i`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_t: Var,
        t: &[usize],
        conds: &[&Condition],
        injections: &[Injection],
        s: f64,
    ) -> Result<Var> {
        let c = &self.config;
        let bsz = t.len();
        let (np, lt, l, d) = (c.patches(), c.text_len, c.seq_len(), c.d_model);
        if conds.len() != bsz || g.shape(x_t) != [bsz * np, c.patch_dim()] {
            return Err(Error::shape(
                "dit forward",
                format!("{} conditions, {bsz} steps, x_t {:?}", conds.len(), g.shape(x_t)),
            ));
        }
        let mut text = Vec::with_capacity(bsz * lt * c.d_txt);
        let mut pooled = Vec::with_capacity(bsz * c.d_mod);
        for cond in conds {
            if cond.text.shape() != [lt, c.d_txt] || cond.pooled.numel() != c.d_mod {
                return Err(Error::shape("dit forward", "condition does not match config"));
            }
            text.extend_from_slice(cond.text.data());
            pooled.extend_from_slice(cond.pooled.data());
        }
        for inj in injections {
            if inj.sample >= bsz {
                return Err(Error::OutOfRange {
                    what: "injection sample",
                    index: inj.sample,
                    limit: bsz,
                });
            }
            let limit = conds[inj.sample].prompt_len;
            if inj.token >= limit {
                return Err(Error::OutOfRange {
                    what: "concept token",
                    index: inj.token,
                    limit,
                });
            }
            if g.shape(inj.directions) != [c.n_blocks, c.d_mod] {
                return Err(Error::shape(
                    "dit forward",
                    format!("directions {:?}", g.shape(inj.directions)),
                ));
            }
        }

        let text = g.constant(Tensor::from_parts(vec![bsz * lt, c.d_txt], text));
        let txt = self.layout.text_in.apply(g, p, text)?;
        let img = self.layout.img_in.apply(g, p, x_t)?;
        let mut pos = Vec::with_capacity(bsz * np * d);
        for _ in 0..bsz {
            pos.extend_from_slice(self.pos.data());
        }
        let pos = g.constant(Tensor::from_parts(vec![bsz * np, d], pos));
        let img = g.add(img, pos)?;
        let both = g.concat_rows(&[txt, img])?;
        // Interleave into per-sample [text, image] sequences.
        let mut order = Vec::with_capacity(bsz * l);
        for b in 0..bsz {
            order.extend((0..lt).map(|j| b * lt + j));
            order.extend((0..np).map(|j| bsz * lt + b * np + j));
        }
        let mut x = g.gather_rows(both, &order)?;

        let time = self.time_term(g, p, t)?;
        let pooled = g.constant(Tensor::from_parts(vec![bsz, c.d_mod], pooled));
        let y = g.add(time, pooled)?;
        let owner: Vec<usize> = (0..bsz * l).map(|r| r / l).collect();
        let y_tok = g.gather_rows(y, &owner)?;
        let rows: Vec<usize> = injections.iter().map(|i| i.sample * l + i.token).collect();

        for (i, blk) in self.layout.blocks.iter().enumerate() {
            let y_i = if injections.is_empty() {
                y_tok
            } else {
                let parts = injections
                    .iter()
                    .map(|inj| g.gather_rows(inj.directions, &[i]))
                    .collect::<Result<Vec<_>>>()?;
                let off = g.concat_rows(&parts)?;
                let off = g.scale(off, s)?;
                g.scatter_add_rows(y_tok, off, &rows)?
            };
            x = self.block_forward(g, p, blk, x, y_i, bsz)?;
        }

        let img_rows: Vec<usize> = (0..bsz).flat_map(|b| (0..np).map(move |j| b * l + lt + j)).collect();
        let h = g.gather_rows(x, &img_rows)?;
        let owner: Vec<usize> = (0..bsz * np).map(|r| r / np).collect();
        let y_img = g.gather_rows(y, &owner)?;
        let m = self.layout.final_mod.apply(g, p, y_img)?;
        let scale = g.slice_cols(m, 0, d)?;
        let shift = g.slice_cols(m, d, d)?;
        let h = g.layer_norm(h, LN_EPS)?;
        let h = g.mul(h, scale)?;
        let h = g.add(h, shift)?;
        self.layout.final_out.apply(g, p, h)
    }

    fn block_forward(&self, g: &mut Graph, p: &Bound, blk: &Block, x: Var, y_tok: Var, bsz: usize) -> Result<Var> {
        let d = self.config.d_model;
        let h = adaln_modulate(g, x, y_tok, p.var(blk.attn_mod.w), p.var(blk.attn_mod.b))?;
        let qkv = blk.qkv.apply(g, p, h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let a = g.attention(q, k, v, bsz, self.config.heads)?;
        let a = blk.out.apply(g, p, a)?;
        let x = g.add(x, a)?;
        let h = adaln_modulate(g, x, y_tok, p.var(blk.ff_mod.w), p.var(blk.ff_mod.b))?;
        let h = blk.ff1.apply(g, p, h)?;
        let h = g.silu(h)?;
        let h = blk.ff2.apply(g, p, h)?;
        g.add(x, h)
    }

    /// One block on its own, for verification: `x` is `[B·seq_len, d_model]`
    /// and `y_tok` the per-token modulation rows.
    pub fn block_only(&self, g: &mut Graph, p: &Bound, block: usize, x: Var, y_tok: Var, bsz: usize) -> Result<Var> {
        let blk = self.layout.blocks.get(block).ok_or(Error::OutOfRange {
            what: "block",
            index: block,
            limit: self.config.n_blocks,
        })?;
        self.block_forward(g, p, blk, x, y_tok, bsz)
    }

    /// Names of the `(w, b)` parameters of a block's attention AdaLN head.
    pub fn attn_head(&self, block: usize) -> (ParamId, ParamId) {
        let l = self.layout.blocks[block].attn_mod;
        (l.w, l.b)
    }

    /// ε̂ for one image-shaped `x_t` with concept direction sets
    /// `(token, [n_blocks, d_mod])`.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: &Condition,
        concepts: &[(usize, Tensor)],
        s: f64,
    ) -> Result<Tensor> {
        let c = &self.config;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(patchify(x_t, c.patch)?);
        let inj = concepts
            .iter()
            .map(|(token, dirs)| Injection {
                sample: 0,
                token: *token,
                directions: g.constant(dirs.clone()),
            })
            .collect::<Vec<_>>();
        let out = self.forward(&mut g, &p, x, &[t], &[cond], &inj, s)?;
        unpatchify(g.value(out).data(), c.image_size, c.image_size, 3, c.patch)
    }

    /// SHA-256 of every weight.
    pub fn content_hash(&self) -> [u8; 32] {
        self.params.content_hash()
    }
}
