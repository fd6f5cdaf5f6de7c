use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use modapter::adapter::{ConceptInput, Variant};
use modapter::data::dataset::{gen_dataset, read_dataset, ToySample};
use modapter::data::Category;
use modapter::dit::{sample, Condition};
use modapter::eval::bench::{evaluate, Bench, Metrics};
use modapter::modk::Container;
use modapter::ppm::{read_ppm, write_ppm};
use modapter::train::pipeline::{
    evaluate_adapter, fit_routing, load_adapter, load_backbone, pretrain_adapter, run_ablation, save_adapter,
    save_backbone, train_adapter, train_backbone, write_metrics_csv, PipelineConfig, TrainedAdapter,
};
use modapter::verify::gradient_suite;

use crate::config::{apply_env, load_config};

#[derive(Parser, Debug)]
#[command(name = "modapter", version, about = "Modulation-space concept adapter on a miniature diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training dataset; defaults to the generated training set.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone from scratch.
    TrainBackbone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feature-matching stage of the adapter.
    PretrainAdapter {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffusion stage of the adapter with the backbone frozen.
    TrainAdapter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        /// Adapter checkpoint to continue from, normally the pretrained one.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one image, optionally personalized with concept images.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// `<image.ppm> <word>`: binds the image's directions to `word` in the prompt.
        #[arg(long, num_args = 2, value_names = ["IMAGE", "WORD"], action = clap::ArgAction::Append)]
        concept: Vec<String>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Write the predicted direction sets to a MODK file.
        #[arg(long)]
        dump_directions: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out bench.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        /// Without an adapter the prompt is sampled with no injection.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Comma-separated categories personalized in every case, or `pairs`.
        #[arg(long, default_value = "pairs")]
        categories: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and score one ablation variant on several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        variant: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and both training paths.
    Gradcheck,
}

fn config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    apply_env(&mut cfg)?;
    Ok(cfg)
}

fn data(common: &Common, cfg: &PipelineConfig) -> Result<Vec<ToySample>> {
    match &common.data {
        Some(p) => Ok(read_dataset(p)?),
        None => Ok(cfg.training_data()),
    }
}

fn progress(label: &str, every: usize) -> impl FnMut(usize, f64) + '_ {
    let mut avg = None::<f64>;
    move |step, loss| {
        let a = avg.map_or(loss, |a| 0.98 * a + 0.02 * loss);
        avg = Some(a);
        if step % every == 0 {
            eprintln!("{label} step {step} loss {loss:.5} avg {a:.5}");
        }
    }
}

fn parse_variant(name: &str) -> Result<Variant> {
    name.parse::<Variant>().map_err(|e| anyhow!(e))
}

fn parse_categories(s: &str) -> Result<Option<Vec<Category>>> {
    if s == "pairs" {
        return Ok(None);
    }
    s.split(',')
        .map(|c| Category::parse(c.trim()).ok_or_else(|| anyhow!("unknown category {c:?}")))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Prompt words and the token bound to each concept word.
fn bind_concepts<'a>(words: &[&str], pairs: &'a [String]) -> Result<Vec<(&'a str, &'a str, usize)>> {
    pairs
        .chunks(2)
        .map(|p| {
            let (img, word) = (p[0].as_str(), p[1].as_str());
            let token = words
                .iter()
                .position(|w| *w == word)
                .ok_or_else(|| anyhow!("concept word {word:?} does not occur in the prompt"))?;
            Ok((img, word, token))
        })
        .collect()
}

fn print_metrics(label: &str, m: &Metrics) {
    let per: Vec<String> = m
        .per_concept
        .iter()
        .map(|(c, h, t)| format!("{}={h}/{t}", c.name()))
        .collect();
    println!(
        "{label} seed={} cp={:.4} pf={:.4} cp_pf={:.4} joint={:.4} n={} [{}]",
        m.seed,
        m.cp,
        m.pf,
        m.cp_pf,
        m.joint,
        m.n_samples,
        per.join(" ")
    );
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, seed, out } => {
            let mut cfg = PipelineConfig::default();
            apply_env(&mut cfg)?;
            let samples = gen_dataset(n, seed.unwrap_or(cfg.seed), &out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::TrainBackbone { common, out } => {
            let cfg = config(&common)?;
            let enc = cfg.encoders();
            let data = data(&common, &cfg)?;
            let bb = train_backbone(&cfg, &enc, &data, &mut progress("backbone", 500))?;
            save_backbone(&out, &bb)?;
            println!("backbone {} -> {}", hex(&bb.content_hash()), out.display());
        }
        Command::PretrainAdapter {
            common,
            variant,
            seed,
            out,
        } => {
            let variant = parse_variant(&variant)?;
            if !variant.pretrains() {
                bail!("variant {variant} skips the feature-matching stage");
            }
            let cfg = config(&common)?.with_variant(variant);
            cfg.validate()?;
            let enc = cfg.encoders();
            let data = data(&common, &cfg)?;
            let seed = seed.unwrap_or(cfg.seed);
            let routing = fit_routing(&enc, cfg.adapter.n_experts, cfg.seed)?;
            let mut adapter = modapter::adapter::ModAdapter::new(cfg.adapter.clone(), seed)?;
            let pre = &data[..data.len().min(2000)];
            let losses = pretrain_adapter(&cfg.pretrain, &enc, &routing, &mut adapter, pre, seed, &mut progress("pretrain", 250))?;
            let t = TrainedAdapter {
                adapter,
                routing,
                pretrain_losses: losses,
            };
            save_adapter(&out, &t)?;
            println!("adapter ({variant}) -> {}", out.display());
        }
        Command::TrainAdapter {
            common,
            backbone,
            init,
            variant,
            seed,
            out,
        } => {
            let cfg0 = config(&common)?;
            let bb = load_backbone(&backbone)?;
            let before = bb.content_hash();
            let mut t = match &init {
                Some(p) => load_adapter(p)?,
                None => {
                    let cfg = cfg0.with_variant(parse_variant(&variant)?);
                    cfg.validate()?;
                    TrainedAdapter {
                        adapter: modapter::adapter::ModAdapter::new(cfg.adapter.clone(), seed.unwrap_or(cfg.seed))?,
                        routing: fit_routing(&cfg.encoders(), cfg.adapter.n_experts, cfg.seed)?,
                        pretrain_losses: Vec::new(),
                    }
                }
            };
            let cfg = PipelineConfig {
                adapter: t.adapter.config.clone(),
                ..cfg0
            };
            cfg.validate()?;
            let enc = cfg.encoders();
            let data = data(&common, &cfg)?;
            train_adapter(
                &cfg.adapter_train,
                cfg.scale,
                &bb,
                &enc,
                &t.routing,
                &mut t.adapter,
                &data,
                seed.unwrap_or(cfg.seed),
                &mut progress("adapter", 250),
            )?;
            if bb.content_hash() != before {
                bail!("backbone weights changed during adapter training");
            }
            save_adapter(&out, &t)?;
            println!("adapter ({}) -> {}", t.adapter.config.variant, out.display());
        }
        Command::Infer {
            common,
            backbone,
            adapter,
            prompt,
            concept,
            scale,
            seed,
            steps,
            out,
            dump_directions,
        } => {
            let cfg = config(&common)?;
            let enc = cfg.encoders();
            let bb = load_backbone(&backbone)?;
            let words: Vec<&str> = prompt.split_whitespace().collect();
            let cond = Condition::new(&enc, &words, bb.config.text_len)?;
            let bound = bind_concepts(&words, &concept)?;
            let mut concepts = Vec::with_capacity(bound.len());
            let mut dump = Container::new();
            if !bound.is_empty() {
                let path = adapter.as_ref().context("--concept needs --adapter")?;
                let t = load_adapter(path)?;
                for (i, (img, word, token)) in bound.iter().enumerate() {
                    let image = read_ppm(Path::new(img))?;
                    let input = ConceptInput::new(&enc, &t.routing, &image, word)?;
                    let (_, dirs) = t.adapter.predict_directions(&input)?;
                    dump.put_text(format!("concept{i}.word"), word);
                    dump.put_u32(format!("concept{i}.token"), &[*token as u32]);
                    dump.put_tensor(format!("concept{i}.directions"), &dirs);
                    concepts.push((*token, dirs));
                }
            }
            let s = scale.unwrap_or(cfg.scale);
            let img = sample(&bb, &cond, &concepts, s, steps.unwrap_or(cfg.sample_steps), seed)?;
            write_ppm(&img, &out)?;
            if let Some(p) = dump_directions {
                dump.write(&p)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            backbone,
            adapter,
            categories,
            seeds,
            csv,
        } => {
            let cfg = config(&common)?;
            let enc = cfg.encoders();
            let bb = load_backbone(&backbone)?;
            let cats = parse_categories(&categories)?;
            let t = adapter.as_ref().map(|p| load_adapter(p)).transpose()?;
            let label = t.as_ref().map_or("baseline".to_string(), |t| t.adapter.config.variant.to_string());
            let mut rows = Vec::new();
            for &seed in &seeds {
                let bench = match &cats {
                    Some(c) => Bench::new(c, cfg.eval_cases, seed)?,
                    None => Bench::pairs(cfg.eval_cases, seed),
                };
                let m = match &t {
                    Some(t) => evaluate_adapter(&cfg, &bb, &enc, t, &bench, seed)?,
                    None => evaluate(&bb, &enc, None, &bench, cfg.scale, cfg.sample_steps, seed)?,
                };
                print_metrics(&label, &m);
                rows.push((label.clone(), m));
            }
            if let Some(p) = csv {
                write_metrics_csv(&p, &rows)?;
            }
        }
        Command::Ablate {
            common,
            backbone,
            variant,
            seeds,
            csv,
        } => {
            let variant = parse_variant(&variant)?;
            let cfg = config(&common)?;
            let enc = cfg.encoders();
            let bb = load_backbone(&backbone)?;
            let data = data(&common, &cfg)?;
            let mut log = progress(variant.name(), 500);
            let ms = run_ablation(variant, &cfg, &bb, &enc, &data, &seeds, &mut |_, s, l| log(s, l))?;
            let rows: Vec<(&str, Metrics)> = ms.into_iter().map(|m| (variant.name(), m)).collect();
            for (l, m) in &rows {
                print_metrics(l, m);
            }
            if let Some(p) = csv {
                write_metrics_csv(&p, &rows)?;
            }
        }
        Command::Gradcheck => {
            let reports = gradient_suite()?;
            let mut failed = 0;
            let mut out = std::io::stdout().lock();
            for r in &reports {
                let tag = if r.passed() { "ok" } else { "FAIL" };
                writeln!(out, "{tag:4} {:28} seed {} max_rel_err {:.3e} (tol {:.0e})", r.name, r.seed, r.max_rel_err, r.tol)?;
                failed += !r.passed() as usize;
            }
            if failed > 0 {
                return Err(GradcheckFailed(failed).into());
            }
        }
    }
    Ok(())
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[derive(Debug)]
pub struct GradcheckFailed(pub usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient checks failed", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

/// Parses `argv` (program name first) and runs it. Returns the exit code:
/// 0 on success, 2 for usage errors, 1 for any other failure.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
