//! `key = value` run configuration.
//!
//! Every key is optional; missing keys keep the defaults of
//! [`PipelineConfig`]. Shared widths set every module at once, so `d_mod`
//! applies to the encoders, the backbone and the adapter together.

use std::path::Path;

use modapter::train::pipeline::PipelineConfig;
use modapter::train::StagePlan;
use modapter::{Error, Result};

/// Environment variable that overrides the global seed.
pub const SEED_ENV: &str = "MODAPTER_SEED";

type Setter = fn(&mut PipelineConfig, &str) -> std::result::Result<(), String>;

fn int(v: &str, lo: u64, hi: u64) -> std::result::Result<u64, String> {
    let x: u64 = v.parse().map_err(|_| format!("{v:?} is not a non-negative integer"))?;
    if x < lo || x > hi {
        return Err(format!("{x} out of range [{lo}, {hi}]"));
    }
    Ok(x)
}

fn real(v: &str, lo: f64, hi: f64, open_lo: bool) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("{v:?} is not a number"))?;
    let below = if open_lo { x <= lo } else { x < lo };
    if !x.is_finite() || below || x > hi {
        let l = if open_lo { "(" } else { "[" };
        return Err(format!("{x} out of range {l}{lo}, {hi}]"));
    }
    Ok(x)
}

macro_rules! int_key {
    ($lo:expr, $hi:expr, |$c:ident, $x:ident| $body:expr) => {
        (|$c: &mut PipelineConfig, v: &str| {
            let $x = int(v, $lo, $hi)? as usize;
            $body;
            Ok(())
        }) as Setter
    };
}

macro_rules! real_key {
    ($lo:expr, $hi:expr, $open:expr, |$c:ident, $x:ident| $body:expr) => {
        (|$c: &mut PipelineConfig, v: &str| {
            let $x = real(v, $lo, $hi, $open)?;
            $body;
            Ok(())
        }) as Setter
    };
}

/// Every accepted key with its setter.
pub fn keys() -> Vec<(&'static str, Setter)> {
    vec![
        ("seed", (|c: &mut PipelineConfig, v: &str| {
            c.seed = int(v, 0, u64::MAX)?;
            Ok(())
        }) as Setter),
        ("encoder_seed", (|c: &mut PipelineConfig, v: &str| {
            c.encoder.seed = int(v, 0, u64::MAX)?;
            Ok(())
        }) as Setter),
        ("d_txt", int_key!(2, 4096, |c, x| {
            c.encoder.d_txt = x;
            c.dit.d_txt = x;
        })),
        ("d_img", int_key!(1, 4096, |c, x| {
            c.encoder.d_img = x;
            c.adapter.d_img = x;
        })),
        ("d_mod", int_key!(2, 4096, |c, x| {
            c.encoder.d_mod = x;
            c.dit.d_mod = x;
            c.adapter.d_mod = x;
        })),
        ("patch", int_key!(1, 16, |c, x| {
            c.encoder.patch = x;
            c.dit.patch = x;
        })),
        ("n_blocks", int_key!(1, 64, |c, x| {
            c.dit.n_blocks = x;
            c.adapter.n_queries = x;
        })),
        ("d_model", int_key!(2, 4096, |c, x| c.dit.d_model = x)),
        ("heads", int_key!(1, 64, |c, x| c.dit.heads = x)),
        ("ff_hidden", int_key!(1, 65536, |c, x| c.dit.ff_hidden = x)),
        ("d_time", int_key!(2, 4096, |c, x| c.dit.d_time = x)),
        ("text_len", int_key!(12, 256, |c, x| c.dit.text_len = x)),
        ("t_steps", int_key!(2, 10_000, |c, x| c.dit.t_steps = x)),
        ("beta_start", real_key!(0.0, 0.5, true, |c, x| c.dit.beta_start = x)),
        ("beta_end", real_key!(0.0, 0.5, true, |c, x| c.dit.beta_end = x)),
        ("n_layers", int_key!(1, 16, |c, x| c.adapter.n_layers = x)),
        ("n_experts", int_key!(1, 7, |c, x| c.adapter.n_experts = x)),
        ("expert_hidden", int_key!(1, 65536, |c, x| c.adapter.expert_hidden = x)),
        ("p_drop", real_key!(0.0, 1.0, false, |c, x| c.augment.p_drop = x)),
        ("p_carry", real_key!(0.0, 1.0, false, |c, x| c.augment.p_carry = x)),
        ("train_samples", int_key!(1, 10_000_000, |c, x| c.train_samples = x)),
        ("backbone_steps", int_key!(0, 100_000_000, |c, x| c.backbone = with_steps(c.backbone, x))),
        ("backbone_batch", int_key!(1, 4096, |c, x| c.backbone.batch = x)),
        ("backbone_lr", real_key!(0.0, 1.0, true, |c, x| c.backbone.lr = x)),
        ("pretrain_steps", int_key!(0, 100_000_000, |c, x| c.pretrain = with_steps(c.pretrain, x))),
        ("pretrain_batch", int_key!(1, 4096, |c, x| c.pretrain.batch = x)),
        ("pretrain_lr", real_key!(0.0, 1.0, true, |c, x| c.pretrain.lr = x)),
        ("train_steps", int_key!(0, 100_000_000, |c, x| c.adapter_train = with_steps(c.adapter_train, x))),
        ("train_batch", int_key!(1, 4096, |c, x| c.adapter_train.batch = x)),
        ("train_lr", real_key!(0.0, 1.0, true, |c, x| c.adapter_train.lr = x)),
        ("scale", real_key!(0.0, 100.0, false, |c, x| c.scale = x)),
        ("sample_steps", int_key!(1, 10_000, |c, x| c.sample_steps = x)),
        ("eval_cases", int_key!(1, 1_000_000, |c, x| c.eval_cases = x)),
    ]
}

/// Rebuilds a plan's warmup for a new step count.
fn with_steps(p: StagePlan, steps: usize) -> StagePlan {
    StagePlan {
        final_frac: p.final_frac,
        ..StagePlan::new(p.stage, steps, p.batch, p.lr)
    }
}

/// Parses config text. Errors name the 1-based line.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let table = keys();
    let mut cfg = PipelineConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Config { line, msg };
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let (name, set) = table
            .iter()
            .find(|(n, _)| *n == k)
            .ok_or_else(|| err(format!("unknown key {k:?}")))?;
        if seen.contains(name) {
            return Err(err(format!("duplicate key {k:?}")));
        }
        seen.push(name);
        set(&mut cfg, v).map_err(|m| err(format!("{k}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Config {
        line: 0,
        msg: format!("{} is not UTF-8", path.display()),
    })?;
    parse_config(&text)
}

/// Applies the seed environment override, if set.
pub fn apply_env(cfg: &mut PipelineConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("{SEED_ENV}={v:?} is not a u64")))?;
    }
    Ok(())
}
