use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use mmlayout::diagnostics::{count_costs, svg_line_chart, ProbeSet};
use mmlayout::diffusion::{sample_image, Schedule, TrainExample};
use mmlayout::encoders::{Layout, LayoutDoc, Vocabulary};
use mmlayout::harness::{
    ablate, ablate_strategies, condition_name, ensure_base, prepare, run_cell, ExperimentConfig,
};
use mmlayout::layoutkit::{validate, CoarseDoc, ConvertRules, DatasetRules, Mode};
use mmlayout::mmdit::{load_checkpoint, LoraSpec, LoraTarget, ModelConfig, VariantTag};
use mmlayout::scenes::{benchmark, gen_scene, write_dataset, write_ppm, SceneConfig};

#[derive(Parser)]
#[command(name = "mmlayout", version, about = "Layout-conditioned diffusion transformer laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene dataset.
    GenData {
        #[arg(long, env = "MMLAYOUT_DATA_DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Pretrain the base model of an experiment.
    Pretrain {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Train one layout variant on top of the pretrained base.
    TrainLayout {
        #[arg(long, env = "MMLAYOUT_VARIANT")]
        variant: String,
        #[arg(long, env = "MMLAYOUT_SEED", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Sample one image from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, env = "MMLAYOUT_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Benchmark a checkpoint with the oracle on held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenes: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, env = "MMLAYOUT_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Attention-similarity readings of a checkpoint, or a chart of a metrics CSV.
    Diagnose {
        #[arg(long, conflicts_with = "metrics")]
        checkpoint: Option<PathBuf>,
        /// metrics.csv to chart as SVG.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long, default_value_t = 700)]
        t: usize,
    },
    /// Analytic parameter and MAC counts as JSON.
    CountCosts {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 10)]
        entities: usize,
        #[arg(long, value_enum, default_value_t = Profile::Default)]
        profile: Profile,
        /// LoRA rank wrapped around a Siam variant.
        #[arg(long)]
        lora_rank: Option<usize>,
    },
    /// Layout file tools.
    Layout {
        #[command(subcommand)]
        command: LayoutCommand,
    },
    /// Variant ablation across seeds, or the training-strategy ablation.
    Ablate {
        #[arg(long, value_delimiter = ',', env = "MMLAYOUT_VARIANTS")]
        variants: Option<Vec<String>>,
        /// Number of seeds, counted from zero.
        #[arg(long, env = "MMLAYOUT_SEEDS")]
        seeds: Option<u64>,
        #[arg(long)]
        strategies: bool,
        #[command(flatten)]
        exp: ExpArgs,
    },
}

#[derive(Subcommand)]
enum LayoutCommand {
    /// Check a layout file; exit status 0 iff it is fully valid.
    Validate {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Format)]
        mode: ModeArg,
        #[arg(long)]
        min_entities: Option<usize>,
        #[arg(long)]
        max_entities: Option<usize>,
    },
    /// Turn masks, scribbles or points into a box layout.
    Convert {
        #[arg(long, group = "kind")]
        mask: Option<PathBuf>,
        #[arg(long, group = "kind")]
        scribble: Option<PathBuf>,
        #[arg(long, group = "kind")]
        point: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        pad: f64,
        #[arg(long, default_value_t = 0.2)]
        point_size: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Format,
    Dataset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Desk,
    Tiny,
}

impl Profile {
    fn config(self) -> ModelConfig {
        match self {
            Profile::Default => ModelConfig::default(),
            Profile::Desk => ModelConfig::desk(),
            Profile::Tiny => ModelConfig::tiny(),
        }
    }
}

/// Flags shared by the experiment commands. A `--config` JSON file is
/// applied last and wins over flags.
#[derive(Args, Clone, Default)]
struct ExpArgs {
    #[arg(long, env = "MMLAYOUT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "MMLAYOUT_OUT")]
    out_dir: Option<PathBuf>,
    #[arg(long, env = "MMLAYOUT_EXPERIMENT")]
    experiment: Option<String>,
    #[arg(long, env = "MMLAYOUT_JOBS")]
    jobs: Option<usize>,
    #[arg(long, env = "MMLAYOUT_PRETRAIN_STEPS")]
    pretrain_steps: Option<u64>,
    #[arg(long, env = "MMLAYOUT_LAYOUT_STEPS")]
    layout_steps: Option<u64>,
    #[arg(long, env = "MMLAYOUT_BATCH")]
    batch: Option<usize>,
    #[arg(long, env = "MMLAYOUT_TRAIN_SCENES")]
    train_scenes: Option<usize>,
    #[arg(long, env = "MMLAYOUT_EVAL_SCENES")]
    eval_scenes: Option<usize>,
    #[arg(long, env = "MMLAYOUT_SAMPLE_STEPS")]
    sample_steps: Option<usize>,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.experiment {
            cfg.name = v.clone();
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = self.pretrain_steps {
            cfg.pretrain.steps = v;
        }
        if let Some(v) = self.layout_steps {
            cfg.layout.steps = v;
        }
        if let Some(v) = self.batch {
            cfg.pretrain.batch = v;
            cfg.layout.batch = v;
        }
        if let Some(v) = self.train_scenes {
            cfg.train_scenes = v;
        }
        if let Some(v) = self.eval_scenes {
            cfg.eval_scenes = v;
        }
        if let Some(v) = self.sample_steps {
            cfg.sample_steps = v;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let mut merged = serde_json::to_value(&cfg)?;
            merge(&mut merged, patch);
            cfg = serde_json::from_value(merged).context("config file does not describe an experiment")?;
        }
        Ok(cfg)
    }
}

/// Recursive object merge; non-object values replace.
fn merge(into: &mut Value, patch: Value) {
    match (into, patch) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn scene_config_for(model: &ModelConfig) -> SceneConfig {
    SceneConfig::for_model(model)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            count,
            first_seed,
            exp,
        } => {
            let cfg = exp.resolve()?;
            let manifest = write_dataset(&out, first_seed..first_seed + count, &cfg.scenes)?;
            eprintln!("wrote {} scenes to {}", manifest.items.len(), out.display());
        }
        Command::Pretrain { exp } => {
            let cfg = exp.resolve()?;
            let prep = prepare(&cfg)?;
            ensure_base(&cfg, &prep)?;
            eprintln!("base checkpoint at {}", cfg.base_checkpoint().display());
        }
        Command::TrainLayout { variant, seed, exp } => {
            let cfg = exp.resolve()?;
            let variant = VariantTag::parse(&variant)?;
            let prep = prepare(&cfg)?;
            let base = ensure_base(&cfg, &prep)?;
            let r = run_cell(&cfg, &prep, &base, variant, seed)?;
            print_json(&r.bench)?;
        }
        Command::Sample {
            checkpoint,
            layout,
            out,
            steps,
            eta,
            seed,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let doc = LayoutDoc::load(&layout)?;
            let layout = Layout::encode(&doc, &Vocabulary::default(), &model.config.text)?;
            let s = sample_image(&model, &Schedule::default(), &layout, steps, eta, seed)?;
            write_ppm(&out, &s.image)?;
        }
        Command::Eval {
            checkpoint,
            scenes,
            steps,
            seed,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let sc = scene_config_for(&model.config);
            let eval: Vec<_> = (0..scenes).map(|s| gen_scene(mmlayout::harness::EVAL_SEED_OFFSET + s, &sc)).collect();
            let name = model.variant.name();
            let table = benchmark(&model, &name, &Schedule::default(), &eval, steps, &[seed], &Default::default())?;
            print_json(&table)?;
        }
        Command::Diagnose {
            checkpoint,
            metrics,
            out,
            probes,
            t,
        } => match (checkpoint, metrics) {
            (Some(ck), _) => {
                let (model, _) = load_checkpoint(&ck)?;
                let sc = scene_config_for(&model.config);
                let vocab = Vocabulary::default();
                let examples = (0..probes as u64)
                    .map(|s| {
                        let scene = gen_scene(s, &sc);
                        Ok(TrainExample::new(&scene.image, scene.spec.to_layout(&vocab, &model.config.text)?, model.config.patch)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sim = ProbeSet::new(&examples, &Schedule::default(), t, 0)?.measure(&model)?;
                let heads: Vec<Value> = sim
                    .heads
                    .iter()
                    .map(|(&(b, h), s)| serde_json::json!({"block": b, "head": h, "sim_text": s.sim_text, "sim_layout": s.sim_layout}))
                    .collect();
                print_json(&serde_json::json!({
                    "sim_text": sim.sim_text(),
                    "sim_layout": sim.sim_layout(),
                    "heads": heads,
                }))?;
            }
            (None, Some(csv)) => {
                let svg = chart_metrics(&csv)?;
                match out {
                    Some(p) => std::fs::write(&p, svg)?,
                    None => print!("{svg}"),
                }
            }
            (None, None) => bail!("diagnose needs --checkpoint or --metrics"),
        },
        Command::CountCosts {
            variant,
            entities,
            profile,
            lora_rank,
        } => {
            let variant = VariantTag::parse(&variant)?;
            let lora = lora_rank.map(|rank| LoraSpec {
                rank,
                targets: LoraTarget::ALL.to_vec(),
            });
            if lora.is_some() && variant != VariantTag::Siam {
                bail!("--lora-rank applies to the siam variant only");
            }
            print_json(&count_costs(&profile.config(), variant, entities, lora.as_ref()))?;
        }
        Command::Layout { command } => return layout_command(command),
        Command::Ablate {
            variants,
            seeds,
            strategies,
            exp,
        } => {
            let mut cfg = exp.resolve()?;
            if let Some(v) = variants {
                cfg.variants = v;
            }
            if let Some(n) = seeds {
                cfg.seeds = (0..n).collect();
            }
            if strategies {
                let report = ablate_strategies(&cfg)?;
                for &(bias, lambda) in &cfg.strategies.conditions {
                    println!("{} median_steps={}", condition_name(bias, lambda), report.median_steps(bias, lambda));
                }
            } else {
                let (report, _) = ablate(&cfg)?;
                for (i, r) in report.ordering.iter().enumerate() {
                    println!("{} {} spatial={:.4}", i + 1, r.variant, r.median_spatial);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn layout_command(command: LayoutCommand) -> Result<ExitCode> {
    match command {
        LayoutCommand::Validate {
            file,
            mode,
            min_entities,
            max_entities,
        } => {
            let doc = LayoutDoc::load(&file).with_context(|| format!("reading {}", file.display()))?;
            let mut rules = DatasetRules::default();
            rules.min_entities = min_entities.unwrap_or(rules.min_entities);
            rules.max_entities = max_entities.unwrap_or(rules.max_entities);
            let mode = match mode {
                ModeArg::Format => Mode::Format,
                ModeArg::Dataset => Mode::Dataset,
            };
            let report = validate(&doc, mode, &rules);
            print_json(&report)?;
            Ok(if report.valid() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        LayoutCommand::Convert {
            mask,
            scribble,
            point,
            out,
            pad,
            point_size,
        } => {
            let (kind, path) = match (mask, scribble, point) {
                (Some(p), _, _) => ("mask", p),
                (_, Some(p), _) => ("scribble", p),
                (_, _, Some(p)) => ("point", p),
                _ => bail!("convert needs one of --mask, --scribble or --point"),
            };
            let doc: CoarseDoc = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            if let Some(e) = doc.entities.iter().find(|e| e.input.kind() != kind) {
                bail!("entity `{}` carries a {} but --{kind} was given", e.caption, e.input.kind());
            }
            let layout = doc.to_layout(&ConvertRules {
                scribble_pad: pad,
                point_size,
            })?;
            let valid = validate(&layout, Mode::Format, &DatasetRules::default()).valid();
            match out {
                Some(p) => layout.save(&p)?,
                None => print_json(&layout)?,
            }
            Ok(if valid { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

/// Loss curves (and similarity, when present) from a metrics CSV.
fn chart_metrics(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty metrics file")?.split(',').collect();
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = header[1..].iter().map(|&h| (h, Vec::new())).collect();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let step: f64 = cells[0].parse()?;
        for (k, cell) in cells[1..].iter().enumerate() {
            if let Ok(v) = cell.parse::<f64>() {
                series[k].1.push((step, v));
            }
        }
    }
    series.retain(|(_, p)| !p.is_empty());
    Ok(svg_line_chart(&path.display().to_string(), "step", "value", &series))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
