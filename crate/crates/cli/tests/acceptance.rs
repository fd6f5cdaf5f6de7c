//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Trained artifacts are cached under the cargo target tmp dir, keyed by a
//! fingerprint of the configuration, so only the first run pays for
//! training. Each cached adapter run stores the measurements taken while it
//! trained (backbone hashes, held-out pretraining losses, wall time).

use std::path::{Path, PathBuf};
use std::time::Instant;

use modapter::adapter::{nearest, ModAdapter, RoutingTable, Variant};
use modapter::data::dataset::{read_dataset, write_dataset};
use modapter::data::{Category, ToySample};
use modapter::dit::{sample, Backbone, Condition};
use modapter::encoders::{fnv1a, keyed_rng, Encoders};
use modapter::eval::bench::{evaluate, Bench, Metrics};
use modapter::modk::Container;
use modapter::optim::{AdamWConfig, OptimState};
use modapter::ppm::{read_ppm, write_ppm};
use modapter::train::adapter::{pretrain_eval, pretrain_step};
use modapter::train::pipeline::*;
use modapter::train::TrainStage;
use modapter::verify::{end_to_end_checks, primitive_checks, END_TO_END_TOL, PRIMITIVE_TOL};
use modapter_cli::run_command;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const BENCH_CASES: usize = 64;

struct Ctx {
    cfg: PipelineConfig,
    enc: Encoders,
    data: Vec<ToySample>,
    dir: PathBuf,
    backbone_path: PathBuf,
    backbone: Backbone,
    backbone_minutes: f64,
}

/// One adapter training run with the measurements taken during it.
struct Run {
    t: TrainedAdapter,
    path: PathBuf,
    routing_hash_before: [u8; 32],
    backbone_hash_before: [u8; 32],
    backbone_hash_after: [u8; 32],
    /// Held-out feature loss at initialization and after pretraining.
    holdout: (f64, f64),
    pretrain_minutes: f64,
    train_minutes: f64,
}

fn fingerprint(key: &str) -> String {
    format!("{:016x}", fnv1a(key.as_bytes()))
}

fn hash_u32s(h: &[u8; 32]) -> Vec<u32> {
    h.iter().map(|&b| b as u32).collect()
}

fn u32s_hash(v: &[u32]) -> [u8; 32] {
    let mut h = [0u8; 32];
    for (o, &x) in h.iter_mut().zip(v) {
        *o = x as u8;
    }
    h
}

fn setup() -> Ctx {
    let cfg = PipelineConfig::default();
    let enc = cfg.encoders();
    let data = cfg.training_data();
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let dir = root.join(fingerprint(&format!("{cfg:?}")));
    std::fs::create_dir_all(&dir).unwrap();
    // The backbone depends only on these settings, so adapter-side changes reuse it.
    let bb_key = format!("{:?}{:?}{:?}{:?}{}{}", cfg.encoder, cfg.dit, cfg.augment, cfg.backbone, cfg.train_samples, cfg.seed);
    let bb_fp = fingerprint(&bb_key);
    let backbone_path = root.join(format!("backbone-{bb_fp}.modk"));
    let minutes_path = root.join(format!("backbone-{bb_fp}.minutes"));
    let (backbone, backbone_minutes) = match load_backbone(&backbone_path) {
        Ok(b) => (b, std::fs::read_to_string(&minutes_path).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(f64::NAN)),
        Err(_) => {
            eprintln!("training backbone ({} steps) -> {}", cfg.backbone.steps, backbone_path.display());
            let t0 = Instant::now();
            let b = train_backbone(&cfg, &enc, &data, &mut |s, l| {
                if s % 2000 == 0 {
                    eprintln!("  backbone step {s} loss {l:.4}");
                }
            })
            .unwrap();
            let m = t0.elapsed().as_secs_f64() / 60.0;
            save_backbone(&backbone_path, &b).unwrap();
            std::fs::write(&minutes_path, m.to_string()).unwrap();
            (b, m)
        }
    };
    Ctx {
        cfg,
        enc,
        data,
        dir,
        backbone_path,
        backbone,
        backbone_minutes,
    }
}

/// Held-out feature-matching examples for a seed.
fn holdout_set(ctx: &Ctx, routing: &RoutingTable, seed: u64) -> Vec<modapter::train::adapter::ConceptExample> {
    pretrain_holdout(&ctx.enc, routing, 512, 0x401d_0000 + seed).unwrap()
}

fn adapter_run(ctx: &Ctx, variant: Variant, seed: u64) -> Run {
    let path = ctx.dir.join(format!("adapter-{variant}-{seed}.modk"));
    if let Ok(c) = Container::read(&path) {
        if let Ok(t) = adapter_from_container(&c) {
            let hs = |n: &str| u32s_hash(&c.u32s(n).unwrap());
            let r = c.tensor("run.record").unwrap();
            let r = r.data();
            return Run {
                t,
                path,
                routing_hash_before: hs("run.routing_hash_before"),
                backbone_hash_before: hs("run.backbone_hash_before"),
                backbone_hash_after: hs("run.backbone_hash_after"),
                holdout: (r[0], r[1]),
                pretrain_minutes: r[2],
                train_minutes: r[3],
            };
        }
    }
    eprintln!("training adapter {variant} seed {seed}");
    let cfg = ctx.cfg.with_variant(variant);
    let routing = fit_routing(&ctx.enc, cfg.adapter.n_experts, cfg.seed).unwrap();
    let routing_hash_before = routing.content_hash();
    let mut adapter = ModAdapter::new(cfg.adapter.clone(), seed).unwrap();
    let holdout = holdout_set(ctx, &routing, seed);
    let h0 = pretrain_eval(&adapter, &holdout).unwrap();
    let t0 = Instant::now();
    let mut pretrain_losses = Vec::new();
    if variant.pretrains() {
        let pre = &ctx.data[..ctx.data.len().min(2000)];
        pretrain_losses = pretrain_adapter(&cfg.pretrain, &ctx.enc, &routing, &mut adapter, pre, seed, &mut |s, l| {
            if s % 500 == 0 {
                eprintln!("  pretrain step {s} loss {l:.4}");
            }
        })
        .unwrap();
    }
    let h1 = pretrain_eval(&adapter, &holdout).unwrap();
    let pretrain_minutes = t0.elapsed().as_secs_f64() / 60.0;
    let backbone_hash_before = ctx.backbone.content_hash();
    let t1 = Instant::now();
    train_adapter(&cfg.adapter_train, cfg.scale, &ctx.backbone, &ctx.enc, &routing, &mut adapter, &ctx.data, seed, &mut |s, l| {
        if s % 1000 == 0 {
            eprintln!("  adapter step {s} loss {l:.4}");
        }
    })
    .unwrap();
    let train_minutes = t1.elapsed().as_secs_f64() / 60.0;
    let backbone_hash_after = ctx.backbone.content_hash();
    let t = TrainedAdapter {
        adapter,
        routing,
        pretrain_losses,
    };
    let mut c = adapter_container(&t);
    c.put_u32("run.routing_hash_before", &hash_u32s(&routing_hash_before));
    c.put_u32("run.backbone_hash_before", &hash_u32s(&backbone_hash_before));
    c.put_u32("run.backbone_hash_after", &hash_u32s(&backbone_hash_after));
    c.put_tensor("run.record", &modapter::Tensor::vector(vec![h0, h1, pretrain_minutes, train_minutes]));
    c.write(&path).unwrap();
    Run {
        t,
        path,
        routing_hash_before,
        backbone_hash_before,
        backbone_hash_after,
        holdout: (h0, h1),
        pretrain_minutes,
        train_minutes,
    }
}

struct Report {
    results: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, n: usize, pass: bool, detail: String, t0: Instant) {
        let line = format!(
            "criterion {n:2}: {} | {detail} | {:.1}s",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.results.push((n, pass, line));
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gradient_suite_criterion(rep: &mut Report) {
    let t0 = Instant::now();
    let prim = primitive_checks(&SEEDS).unwrap();
    let e2e = end_to_end_checks(&SEEDS).unwrap();
    let pw = prim.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let ew = e2e.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let pass = pw < PRIMITIVE_TOL && ew < END_TO_END_TOL && e2e.len() == 6 && secs < 60.0;
    rep.record(
        1,
        pass,
        format!("{} primitive checks worst {pw:.2e} (< {PRIMITIVE_TOL:.0e}), {} end-to-end worst {ew:.2e} (< {END_TO_END_TOL:.0e})", prim.len(), e2e.len()),
        t0,
    );
}

fn zero_scale_criterion(rep: &mut Report, ctx: &Ctx, full: &Run) -> PathBuf {
    let t0 = Instant::now();
    let tmp = ctx.dir.join("noop");
    std::fs::create_dir_all(&tmp).unwrap();
    let bench = Bench::new(&[Category::Tone], 10, 0x5ca1e).unwrap();
    let mut equal_files = 0;
    let mut equal_tensors = 0;
    let mut rng = keyed_rng("noop-seeds", 0);
    for (i, case) in bench.cases.iter().enumerate() {
        let prompt = case.prompt().words.join(" ");
        let seed: u64 = rng.random_range(0..1_000_000);
        let img = tmp.join(format!("concept{i}.ppm"));
        write_ppm(&case.concepts[0].image(), &img).unwrap();
        let plain = tmp.join(format!("plain{i}.ppm"));
        let zero = tmp.join(format!("zero{i}.ppm"));
        let seed_s = seed.to_string();
        let common = ["modapter", "infer", "--backbone", ctx.backbone_path.to_str().unwrap(), "--prompt", &prompt, "--seed", &seed_s];
        let mut a = common.to_vec();
        a.extend_from_slice(&["--out", plain.to_str().unwrap()]);
        let mut b = common.to_vec();
        b.extend_from_slice(&[
            "--adapter",
            full.path.to_str().unwrap(),
            "--concept",
            img.to_str().unwrap(),
            "tone",
            "--scale",
            "0",
            "--out",
            zero.to_str().unwrap(),
        ]);
        if run_command(a) == 0 && run_command(b) == 0 && std::fs::read(&plain).unwrap() == std::fs::read(&zero).unwrap() {
            equal_files += 1;
        }
        // Same comparison on the raw sampler output, bit for bit.
        let words = case.prompt().words;
        let cond = Condition::new(&ctx.enc, &words, ctx.backbone.config.text_len).unwrap();
        let input = modapter::adapter::ConceptInput::new(&ctx.enc, &full.t.routing, &case.concepts[0].image(), "tone").unwrap();
        let (_, dirs) = full.t.adapter.predict_directions(&input).unwrap();
        let token = words.iter().position(|w| *w == "tone").unwrap();
        let x = sample(&ctx.backbone, &cond, &[], 1.0, ctx.cfg.sample_steps, seed).unwrap();
        let y = sample(&ctx.backbone, &cond, &[(token, dirs)], 0.0, ctx.cfg.sample_steps, seed).unwrap();
        if x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()) {
            equal_tensors += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = equal_files == 10 && equal_tensors == 10 && secs < 60.0;
    rep.record(2, pass, format!("{equal_files}/10 CLI outputs and {equal_tensors}/10 sampler tensors bitwise equal"), t0);
    tmp.join("plain0.ppm")
}

fn frozen_backbone_criterion(rep: &mut Report, ctx: &Ctx, runs: &[Run]) {
    let t0 = Instant::now();
    let reference = load_backbone(&ctx.backbone_path).unwrap().content_hash();
    let same = runs
        .iter()
        .filter(|r| r.backbone_hash_before == reference && r.backbone_hash_after == reference)
        .count();
    let minutes: Vec<f64> = runs.iter().map(|r| r.pretrain_minutes + r.train_minutes).collect();
    let worst = minutes.iter().cloned().fold(0.0, f64::max);
    let pass = same == runs.len() && ctx.backbone.content_hash() == reference && worst < 15.0;
    rep.record(
        3,
        pass,
        format!(
            "hash unchanged in {same}/{} runs of {} pretrain + {} train steps; longest run {worst:.1} min",
            runs.len(),
            ctx.cfg.pretrain.steps,
            ctx.cfg.adapter_train.steps
        ),
        t0,
    );
}

fn additivity_criterion(rep: &mut Report, ctx: &Ctx) {
    let t0 = Instant::now();
    let vocab: Vec<String> = ctx.enc.vocab().words().to_vec();
    let concepts: Vec<&str> = vocab.iter().map(|s| s.as_str()).filter(|w| Category::of_concept_word(w).is_some()).collect();
    let mut sets: Vec<Vec<&str>> = vocab.iter().map(|w| vec![w.as_str()]).collect();
    for i in 0..vocab.len() {
        for j in i..vocab.len() {
            sets.push(vec![&vocab[i], &vocab[j]]);
        }
    }
    let mut worst = 0.0f64;
    let mut n = 0;
    for &c in &concepts {
        let base = ctx.enc.prompt_feature(&[c]).unwrap();
        for attrs in &sets {
            let mut plus = attrs.clone();
            plus.push(c);
            let lhs = ctx.enc.prompt_feature(&plus).unwrap();
            let rhs = ctx.enc.prompt_feature(attrs).unwrap();
            for k in 0..lhs.numel() {
                worst = worst.max((lhs.data()[k] - base.data()[k] - rhs.data()[k]).abs());
            }
            n += 1;
        }
    }
    rep.record(
        4,
        worst <= 1e-12,
        format!("{} concept words x {} attribute sets ({n} pairs), max |error| {worst:.2e} (<= 1e-12)", concepts.len(), sets.len()),
        t0,
    );
}

fn pretraining_criterion(rep: &mut Report, ctx: &Ctx, runs: &[Run]) {
    let t0 = Instant::now();
    let routing = fit_routing(&ctx.enc, ctx.cfg.adapter.n_experts, ctx.cfg.seed).unwrap();
    let batch = concept_examples(&ctx.enc, &routing, &ctx.data, 8, 3).unwrap();
    let mut ad = ModAdapter::new(ctx.cfg.adapter.clone(), 0).unwrap();
    let mut opt = OptimState::new(AdamWConfig::default(), &ad.params);
    let losses: Vec<f64> = (0..200)
        .map(|_| pretrain_step(&mut ad, &mut opt, &batch, TrainStage::AdapterPretrain, 3e-3).unwrap())
        .collect();
    let first_below = losses.iter().position(|&l| l < 0.01 * losses[0]);
    let reductions: Vec<f64> = runs.iter().map(|r| 1.0 - r.holdout.1 / r.holdout.0).collect();
    let minutes = runs.iter().map(|r| r.pretrain_minutes).fold(0.0, f64::max);
    let pass = first_below.is_some() && reductions.iter().all(|&r| r >= 0.9) && minutes < 10.0;
    rep.record(
        5,
        pass,
        format!(
            "overfit below 1% at step {:?}; held-out reduction per seed {:?} (>= 0.90); longest pretrain {minutes:.1} min",
            first_below,
            reductions.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
        t0,
    );
}

fn routing_criterion(rep: &mut Report, ctx: &Ctx, runs: &[&Run]) {
    let t0 = Instant::now();
    let routing = fit_routing(&ctx.enc, ctx.cfg.adapter.n_experts, ctx.cfg.seed).unwrap();
    let d = routing.centroids[0].len();
    let mut rng = keyed_rng("routing-oracle", 0);
    let brute = |cs: &[Vec<f64>], x: &[f64]| -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (j, c) in cs.iter().enumerate() {
            let dd: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if dd < bd {
                bd = dd;
                best = j;
            }
        }
        best
    };
    let mut agree = 0;
    let mut scale_ok = 0;
    let scales = [0.25, 3.0, 17.5];
    let points: Vec<Vec<f64>> = (0..10_000).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    for x in &points {
        let r = routing.route(x);
        if r == brute(&routing.centroids, x) {
            agree += 1;
        }
        let invariant = scales.iter().all(|&c| {
            let cs: Vec<Vec<f64>> = routing.centroids.iter().map(|v| v.iter().map(|a| a * c).collect()).collect();
            let xs: Vec<f64> = x.iter().map(|a| a * c).collect();
            nearest(&cs, &xs) == r
        });
        scale_ok += invariant as usize;
    }
    let mut owned = vec![0; routing.n_experts()];
    for &e in &routing.experts {
        owned[e] += 1;
    }
    let covered = owned.iter().all(|&n| n >= 1);
    let stable = runs
        .iter()
        .filter(|r| r.routing_hash_before == routing.content_hash() && r.t.routing.content_hash() == routing.content_hash())
        .count();
    let pass = agree == 10_000 && scale_ok == 10_000 && covered && stable == runs.len();
    rep.record(
        6,
        pass,
        format!(
            "route agrees {agree}/10000; clusters per expert {owned:?}; hash stable in {stable}/{} runs; scaling invariant {scale_ok}/10000",
            runs.len()
        ),
        t0,
    );
}

fn tone_criterion(rep: &mut Report, ctx: &Ctx, full: &[Run]) -> Vec<Metrics> {
    let t0 = Instant::now();
    let mut adapted = Vec::new();
    let mut base = Vec::new();
    for (r, &seed) in full.iter().zip(&SEEDS) {
        let bench = Bench::new(&[Category::Tone], BENCH_CASES, 0x70_0e00 + seed).unwrap();
        adapted.push(evaluate_adapter(&ctx.cfg, &ctx.backbone, &ctx.enc, &r.t, &bench, seed).unwrap());
        base.push(evaluate(&ctx.backbone, &ctx.enc, None, &bench, ctx.cfg.scale, ctx.cfg.sample_steps, seed).unwrap());
    }
    let cp = mean(&adapted.iter().map(|m| m.cp).collect::<Vec<_>>());
    let pf = mean(&adapted.iter().map(|m| m.pf).collect::<Vec<_>>());
    let bcp = mean(&base.iter().map(|m| m.cp).collect::<Vec<_>>());
    let minutes = ctx.backbone_minutes + full.iter().map(|r| r.pretrain_minutes + r.train_minutes).fold(0.0, f64::max);
    let pass = cp >= 0.7 && pf >= 0.7 && cp > bcp;
    rep.record(
        7,
        pass,
        format!(
            "tone CP {cp:.3} (>= 0.7), PF {pf:.3} (>= 0.7), unconditioned CP {bcp:.3}; {} cases x {} seeds; backbone + one adapter {minutes:.1} min",
            BENCH_CASES,
            SEEDS.len()
        ),
        t0,
    );
    adapted
}

fn composition_criterion(rep: &mut Report, ctx: &Ctx, full: &[Run], tone: &[Metrics]) {
    let t0 = Instant::now();
    let mut joint = Vec::new();
    let mut tex = Vec::new();
    for (r, &seed) in full.iter().zip(&SEEDS) {
        let b = Bench::new(&[Category::Texture], BENCH_CASES, 0x7e_0000 + seed).unwrap();
        tex.push(evaluate_adapter(&ctx.cfg, &ctx.backbone, &ctx.enc, &r.t, &b, seed).unwrap().cp);
        let b = Bench::new(&[Category::Tone, Category::Texture], BENCH_CASES, 0xc0_0000 + seed).unwrap();
        joint.push(evaluate_adapter(&ctx.cfg, &ctx.backbone, &ctx.enc, &r.t, &b, seed).unwrap().joint);
    }
    let a_tone = mean(&tone.iter().map(|m| m.cp).collect::<Vec<_>>());
    let a_tex = mean(&tex);
    let j = mean(&joint);
    let bound = 0.8 * a_tone * a_tex;
    rep.record(
        8,
        j >= bound,
        format!("joint {j:.3} vs 0.8 x {a_tone:.3} x {a_tex:.3} = {bound:.3}"),
        t0,
    );
}

fn ablation_criterion(rep: &mut Report, ctx: &Ctx, runs: &[(Variant, Vec<&Run>)]) -> Vec<(&'static str, Metrics)> {
    let t0 = Instant::now();
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for (v, rs) in runs {
        let mut vals = Vec::new();
        for (r, &seed) in rs.iter().zip(&SEEDS) {
            let m = evaluate_adapter(&ctx.cfg, &ctx.backbone, &ctx.enc, &r.t, &ablation_bench(&ctx.cfg, seed), seed).unwrap();
            vals.push(m.cp_pf);
            rows.push((v.name(), m));
        }
        means.push((*v, mean(&vals)));
    }
    let get = |v: Variant| means.iter().find(|(w, _)| *w == v).unwrap().1;
    let full = get(Variant::Full);
    let pass = full - get(Variant::NoPretrain) >= 0.10
        && [Variant::NoVlAttn, Variant::NoMoe, Variant::LinearGating].iter().all(|&v| full >= get(v) - 0.02);
    let detail = means.iter().map(|(v, m)| format!("{v} {m:.3}")).collect::<Vec<_>>().join(", ");
    rep.record(9, pass, format!("mean CP*PF: {detail}"), t0);
    rows
}

fn utilization_criterion(rep: &mut Report, ctx: &Ctx, gating: &[&Run], full: &Run) {
    let t0 = Instant::now();
    let uniform = 1.0 / ctx.cfg.adapter.n_experts as f64;
    let mut mins = Vec::new();
    for (r, &seed) in gating.iter().zip(&SEEDS) {
        let u = expert_usage(&ctx.enc, &r.t.routing, &r.t.adapter, &ctx.data, seed).unwrap();
        mins.push(u.min_share());
    }
    let skewed = mins.iter().filter(|&&m| m <= 0.6 * uniform).count();
    let u = expert_usage(&ctx.enc, &full.t.routing, &full.t.adapter, &ctx.data, 0).unwrap();
    // Expected shares counted from the concept words of the epoch.
    let mut counts = vec![0usize; ctx.cfg.adapter.n_experts];
    for s in &ctx.data {
        for c in Category::ALL {
            let w = c.concept_word(&s.spec);
            let i = full.t.routing.words.iter().position(|x| x == w).unwrap();
            counts[full.t.routing.experts[i]] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let expect: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let exact = (0..ctx.cfg.adapter.n_layers).all(|l| u.shares(l) == expect);
    let pass = skewed >= 2 && exact;
    rep.record(
        10,
        pass,
        format!(
            "linear gating min share per seed {:?} vs threshold {:.4} ({skewed}/3 skewed); k-means shares {:?} exact: {exact}",
            mins.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>(),
            0.6 * uniform,
            expect.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()
        ),
        t0,
    );
}

fn format_criterion(rep: &mut Report, ctx: &Ctx, full: &Run, ppm: &Path, rows: &[(&'static str, Metrics)]) {
    let t0 = Instant::now();
    let tmp = ctx.dir.join("formats");
    std::fs::create_dir_all(&tmp).unwrap();
    let mut ok = Vec::new();

    let ds = tmp.join("data.modk");
    let subset = &ctx.data[..256];
    write_dataset(subset, &ds).unwrap();
    let back = read_dataset(&ds).unwrap();
    let ds2 = tmp.join("data2.modk");
    write_dataset(&back, &ds2).unwrap();
    ok.push(("dataset", back == subset && std::fs::read(&ds).unwrap() == std::fs::read(&ds2).unwrap()));

    let bb = tmp.join("bb.modk");
    save_backbone(&bb, &ctx.backbone).unwrap();
    let bb_ok = std::fs::read(&bb).unwrap() == std::fs::read(&ctx.backbone_path).unwrap()
        && load_backbone(&bb).unwrap().content_hash() == ctx.backbone.content_hash();
    ok.push(("backbone", bb_ok));

    let ad = tmp.join("ad.modk");
    save_adapter(&ad, &full.t).unwrap();
    let t = load_adapter(&ad).unwrap();
    let ad2 = tmp.join("ad2.modk");
    save_adapter(&ad2, &t).unwrap();
    let ad_ok = t.adapter.params == full.t.adapter.params
        && t.routing == full.t.routing
        && t.adapter.config == full.t.adapter.config
        && std::fs::read(&ad).unwrap() == std::fs::read(&ad2).unwrap();
    ok.push(("adapter", ad_ok));

    let ours = read_ppm(ppm).unwrap();
    let ppm_ok = match image::open(ppm) {
        Ok(img) => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let pix: Vec<u8> = rgb.into_raw();
            let expect: Vec<u8> = ours.data().iter().map(|v| (v * 255.0).round() as u8).collect();
            (w, h) == (16, 16) && pix == expect
        }
        Err(_) => false,
    };
    ok.push(("ppm", ppm_ok));

    let csv = tmp.join("metrics.csv");
    write_metrics_csv(&csv, rows).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some("variant,seed,cp,pf,cp_pf,n_samples");
    let body: Vec<&str> = lines.collect();
    let rows_ok = body.len() == rows.len()
        && body.iter().zip(rows).all(|(l, (v, m))| {
            let f: Vec<&str> = l.split(',').collect();
            f.len() == 6
                && f[0] == *v
                && f[1].parse::<u64>().ok() == Some(m.seed)
                && f[2].parse::<f64>().map_or(false, |x| (x - m.cp).abs() < 1e-9)
                && f[3].parse::<f64>().map_or(false, |x| (x - m.pf).abs() < 1e-9)
                && f[4].parse::<f64>().map_or(false, |x| (x - m.cp_pf).abs() < 1e-9)
                && f[5].parse::<usize>().ok() == Some(m.n_samples)
        });
    ok.push(("csv", header_ok && rows_ok));

    let pass = ok.iter().all(|(_, b)| *b);
    let detail = ok.iter().map(|(n, b)| format!("{n} {}", if *b { "ok" } else { "BAD" })).collect::<Vec<_>>().join(", ");
    rep.record(11, pass, detail, t0);
}

fn main() {
    let wall = Instant::now();
    let mut rep = Report { results: Vec::new() };
    gradient_suite_criterion(&mut rep);
    let ctx = setup();
    additivity_criterion(&mut rep, &ctx);

    let mut by_variant: Vec<(Variant, Vec<Run>)> = Vec::new();
    for v in Variant::ALL {
        by_variant.push((v, SEEDS.iter().map(|&s| adapter_run(&ctx, v, s)).collect()));
    }
    let runs_of = |v: Variant| -> Vec<&Run> { by_variant.iter().find(|(w, _)| *w == v).unwrap().1.iter().collect() };
    let full: Vec<&Run> = runs_of(Variant::Full);
    let full_owned: &[Run] = &by_variant.iter().find(|(w, _)| *w == Variant::Full).unwrap().1;
    let all: Vec<&Run> = by_variant.iter().flat_map(|(_, r)| r.iter()).collect();

    let ppm = zero_scale_criterion(&mut rep, &ctx, full[0]);
    frozen_backbone_criterion(&mut rep, &ctx, full_owned);
    pretraining_criterion(&mut rep, &ctx, full_owned);
    routing_criterion(&mut rep, &ctx, &all);
    let tone = tone_criterion(&mut rep, &ctx, full_owned);
    composition_criterion(&mut rep, &ctx, full_owned, &tone);
    let grouped: Vec<(Variant, Vec<&Run>)> = Variant::ALL.iter().map(|&v| (v, runs_of(v))).collect();
    let rows = ablation_criterion(&mut rep, &ctx, &grouped);
    utilization_criterion(&mut rep, &ctx, &runs_of(Variant::LinearGating), full[0]);
    format_criterion(&mut rep, &ctx, full[0], &ppm, &rows);

    rep.results.sort_by_key(|r| r.0);
    println!("\nacceptance summary ({:.1} min wall):", wall.elapsed().as_secs_f64() / 60.0);
    for (_, _, line) in &rep.results {
        println!("{line}");
    }
    let failed: Vec<usize> = rep.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", rep.results.len());
}
