//! Experiment orchestration: data preparation, base pretraining, per-cell
//! layout training and evaluation, and the two ablation drivers.
//!
//! Everything an experiment writes lives under `<out>/<experiment>/` and is
//! listed in exactly one `manifest.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{write_similarity_csv, AttnSimilarity, ProbeSet};
use crate::diffusion::{
    pretrain_base, train_layout, write_metrics_csv, Schedule, StepMetrics, TimestepSampler, TrainConfig, TrainExample,
    Trainer,
};
use crate::encoders::Vocabulary;
use crate::error::{invalid, Error, Result};
use crate::mmdit::{load_checkpoint, save_checkpoint, Model, ModelConfig, VariantTag};
use crate::scenes::{benchmark, gen_scene, BenchRow, BenchTable, OracleConfig, Scene, SceneConfig};

/// First seed of the held-out evaluation scenes; training scenes count up
/// from zero.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

/// Build identifier baked in at compile time.
pub fn build_id() -> &'static str {
    option_env!("MMLAYOUT_BUILD_ID").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

/// Hex sha256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(json)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    /// `(bias sampling, λ_region)` pairs to train under.
    pub conditions: Vec<(bool, f64)>,
    /// Layout steps between evaluations.
    pub eval_every: u64,
    pub max_steps: u64,
    pub eval_scenes: usize,
    /// Threshold is chance spatial plus this margin.
    pub margin: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            conditions: vec![(true, 2.0), (true, 0.0), (false, 2.0), (false, 0.0)],
            eval_every: 250,
            max_steps: 3000,
            eval_scenes: 96,
            margin: 0.20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub scenes: SceneConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub base_seed: u64,
    pub pretrain: TrainConfig,
    pub layout: TrainConfig,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub sample_steps: usize,
    pub oracle: OracleConfig,
    pub probe_scenes: usize,
    pub probe_t: usize,
    pub strategies: StrategyConfig,
    /// Parallel (variant, seed) cells.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        Self {
            name: "desk".into(),
            out_dir: PathBuf::from("runs"),
            scenes: SceneConfig::for_model(&model),
            model,
            train_scenes: 2000,
            eval_scenes: 500,
            base_seed: 0,
            pretrain: TrainConfig {
                steps: 8000,
                lr: 1e-3,
                probe_every: 0,
                ..TrainConfig::default()
            },
            layout: TrainConfig {
                steps: 5000,
                ..TrainConfig::default()
            },
            variants: vec!["adapter".into(), "m3".into(), "siam".into()],
            seeds: vec![0, 1, 2],
            sample_steps: 50,
            oracle: OracleConfig::default(),
            probe_scenes: 8,
            probe_t: 700,
            strategies: StrategyConfig::default(),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn root(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn cell_dir(&self, variant: &str, seed: u64) -> PathBuf {
        self.root().join(variant).join(seed.to_string())
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.cell_dir("pretrain", self.base_seed).join("model.ckpt")
    }

    pub fn parsed_variants(&self) -> Result<Vec<VariantTag>> {
        self.variants.iter().map(|v| VariantTag::parse(v)).collect()
    }

    /// Hash of everything that determines results; output location and
    /// parallelism are left out.
    pub fn fingerprint(&self) -> Result<String> {
        config_hash(&Self {
            out_dir: PathBuf::new(),
            jobs: 1,
            ..self.clone()
        })
    }

    /// Layout-phase config for one cell; the cell seed drives batches.
    fn layout_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.layout.clone()
        }
    }
}

/// Provenance record written beside every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub config_sha256: String,
    pub build: String,
    /// Files this run read, relative to the experiment root.
    pub inputs: Vec<String>,
    /// Files this run wrote, relative to its own directory.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, variant: &str, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            experiment: cfg.name.clone(),
            variant: variant.into(),
            seed,
            config_sha256: cfg.fingerprint()?,
            build: build_id().into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Data shared by every cell of an experiment.
pub struct Prepared {
    pub train: Vec<TrainExample>,
    pub eval: Vec<Scene>,
    pub schedule: Schedule,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    if cfg.scenes.image_size != cfg.model.image_size || cfg.scenes.patch != cfg.model.patch {
        return Err(invalid("scene geometry must match the model's image size and patch"));
    }
    let vocab = Vocabulary::default();
    let train = (0..cfg.train_scenes as u64)
        .map(|s| {
            let scene = gen_scene(s, &cfg.scenes);
            TrainExample::new(&scene.image, scene.spec.to_layout(&vocab, &cfg.model.text)?, cfg.model.patch)
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = (0..cfg.eval_scenes as u64)
        .map(|s| gen_scene(EVAL_SEED_OFFSET + s, &cfg.scenes))
        .collect();
    Ok(Prepared {
        train,
        eval,
        schedule: Schedule::default(),
    })
}

/// Pretrained base, read from its checkpoint when present. A fresh run
/// also goes through the checkpoint so later runs see identical weights.
pub fn ensure_base(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Model> {
    let path = cfg.base_checkpoint();
    if path.exists() {
        let (model, _) = load_checkpoint(&path)?;
        if model.config != cfg.model || model.variant != VariantTag::Base {
            return Err(invalid(format!("{} does not match the experiment's base model", path.display())));
        }
        return Ok(model);
    }
    let dir = path.parent().expect("checkpoint path has a parent");
    std::fs::create_dir_all(dir)?;
    let mut model = Model::new_base(cfg.model.clone(), cfg.base_seed)?;
    let pcfg = TrainConfig {
        seed: cfg.base_seed,
        ..cfg.pretrain.clone()
    };
    let metrics = pretrain_base(&mut model, &prep.train, &pcfg, &prep.schedule)?;
    save_checkpoint(&path, &model, pcfg.steps)?;
    write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    let mut m = Manifest::new("pretrain", cfg, "pretrain", cfg.base_seed)?;
    m.outputs = vec!["model.ckpt".into(), "metrics.csv".into()];
    m.write(dir)?;
    Ok(load_checkpoint(&path)?.0)
}

/// Unconditioned spatial rate for one evaluation seed.
pub fn chance_row(cfg: &ExperimentConfig, prep: &Prepared, base: &Model, seed: u64, eval: &[Scene]) -> Result<BenchRow> {
    let table = benchmark(base, "base", &prep.schedule, eval, cfg.sample_steps, &[seed], &cfg.oracle)?;
    Ok(table.rows.into_iter().next().expect("one seed gives one row"))
}

/// Everything one (variant, seed) cell produced.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub variant: String,
    pub seed: u64,
    pub bench: BenchRow,
    pub metrics: Vec<StepMetrics>,
    pub similarity: Vec<(u64, AttnSimilarity)>,
}

/// Train one variant from the base, probe attention along the way, and
/// benchmark the result.
pub fn run_cell(cfg: &ExperimentConfig, prep: &Prepared, base: &Model, variant: VariantTag, seed: u64) -> Result<CellResult> {
    let name = variant.name();
    let dir = cfg.cell_dir(&name, seed);
    std::fs::create_dir_all(&dir)?;
    if variant == VariantTag::Base {
        let bench = chance_row(cfg, prep, base, seed, &prep.eval)?;
        BenchTable { rows: vec![bench.clone()] }.write_csv(&dir.join("bench.csv"))?;
        let mut m = Manifest::new("eval", cfg, &name, seed)?;
        m.inputs = vec![rel(cfg, &cfg.base_checkpoint())];
        m.outputs = vec!["bench.csv".into()];
        m.write(&dir)?;
        return Ok(CellResult {
            variant: name,
            seed,
            bench,
            metrics: Vec::new(),
            similarity: Vec::new(),
        });
    }

    let mut model = Model::with_variant(base, variant, seed)?;
    let probes = ProbeSet::new(&prep.train[..cfg.probe_scenes.min(prep.train.len())], &prep.schedule, cfg.probe_t, seed)?;
    let tcfg = cfg.layout_cfg(seed);
    let mut similarity = Vec::new();
    let metrics = {
        let mut step = 0;
        let mut probe = |m: &Model| {
            let s = probes.measure(m)?;
            let v = s.values();
            similarity.push((step, s));
            step += tcfg.probe_every;
            Ok(v)
        };
        train_layout(&mut model, &prep.train, &tcfg, &prep.schedule, Some(&mut probe))?
    };
    let bench = benchmark(&model, &name, &prep.schedule, &prep.eval, cfg.sample_steps, &[seed], &cfg.oracle)?;
    let bench = bench.rows.into_iter().next().expect("one seed gives one row");

    save_checkpoint(&dir.join("model.ckpt"), &model, tcfg.steps)?;
    write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    write_similarity_csv(&dir.join("similarity.csv"), &similarity)?;
    BenchTable { rows: vec![bench.clone()] }.write_csv(&dir.join("bench.csv"))?;
    let mut m = Manifest::new("train-layout", cfg, &name, seed)?;
    m.inputs = vec![rel(cfg, &cfg.base_checkpoint())];
    m.outputs = ["model.ckpt", "metrics.csv", "similarity.csv", "bench.csv"].map(String::from).to_vec();
    m.write(&dir)?;
    Ok(CellResult {
        variant: name,
        seed,
        bench,
        metrics,
        similarity,
    })
}

fn rel(cfg: &ExperimentConfig, p: &Path) -> String {
    p.strip_prefix(cfg.root()).unwrap_or(p).display().to_string()
}

/// Run `f` over `items` on up to `jobs` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingRow {
    pub variant: String,
    pub median_spatial: f64,
    pub median_color: f64,
    pub median_shape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<BenchRow>,
    /// Sorted by median spatial rate, best first; includes the base.
    pub ordering: Vec<OrderingRow>,
}

impl AblationReport {
    pub fn median_spatial(&self, variant: &str) -> Option<f64> {
        self.ordering.iter().find(|r| r.variant == variant).map(|r| r.median_spatial)
    }
}

/// Variant ablation: every variant under every seed, plus the base as the
/// chance reference.
pub fn ablate(cfg: &ExperimentConfig) -> Result<(AblationReport, Vec<CellResult>)> {
    let prep = prepare(cfg)?;
    let base = ensure_base(cfg, &prep)?;
    let mut variants = cfg.parsed_variants()?;
    if !variants.contains(&VariantTag::Base) {
        variants.insert(0, VariantTag::Base);
    }
    let cells: Vec<(VariantTag, u64)> = variants.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let results = parallel_map(&cells, cfg.jobs, |&(v, s)| run_cell(cfg, &prep, &base, v, s))?;

    let rows: Vec<BenchRow> = results.iter().map(|r| r.bench.clone()).collect();
    let mut by: BTreeMap<&str, Vec<&BenchRow>> = BTreeMap::new();
    for r in &rows {
        by.entry(&r.variant).or_default().push(r);
    }
    let mut ordering: Vec<OrderingRow> = by
        .into_iter()
        .map(|(v, rs)| {
            let col = |f: fn(&BenchRow) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            OrderingRow {
                variant: v.to_owned(),
                median_spatial: col(|r| r.spatial),
                median_color: col(|r| r.color),
                median_shape: col(|r| r.shape),
            }
        })
        .collect();
    ordering.sort_by(|a, b| b.median_spatial.total_cmp(&a.median_spatial).then(a.variant.cmp(&b.variant)));
    let report = AblationReport { rows, ordering };

    let root = cfg.root();
    let mut w = std::io::BufWriter::new(std::fs::File::create(root.join("ordering.csv"))?);
    writeln!(w, "rank,variant,median_spatial,median_color,median_shape")?;
    for (i, r) in report.ordering.iter().enumerate() {
        writeln!(w, "{},{},{:.6},{:.6},{:.6}", i + 1, r.variant, r.median_spatial, r.median_color, r.median_shape)?;
    }
    w.flush()?;
    drop(w);
    std::fs::write(root.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut m = Manifest::new("ablate", cfg, "all", cfg.seeds.first().copied().unwrap_or(0))?;
    m.inputs = results.iter().map(|r| format!("{}/{}/bench.csv", r.variant, r.seed)).collect();
    m.outputs = vec!["ordering.csv".into(), "ablation.json".into()];
    m.write(&root)?;
    Ok((report, results))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRun {
    pub bias: bool,
    pub lambda_region: f64,
    pub seed: u64,
    pub chance: f64,
    pub target: f64,
    /// First evaluated step reaching the target; `None` if it never did.
    pub steps_to_threshold: Option<u64>,
    pub curve: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub runs: Vec<ConvergenceRun>,
}

impl ConvergenceReport {
    /// Median steps-to-threshold for one condition, counting runs that
    /// never reached it as infinitely slow.
    pub fn median_steps(&self, bias: bool, lambda: f64) -> f64 {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.bias == bias && r.lambda_region == lambda)
            .map(|r| r.steps_to_threshold.map_or(f64::INFINITY, |s| s as f64))
            .collect();
        median(&v)
    }
}

pub fn condition_name(bias: bool, lambda: f64) -> String {
    format!("{}-lambda{lambda}", if bias { "bias" } else { "uniform" })
}

/// Siam under each training-strategy condition with shared seeds, stopping
/// each run once oracle spatial adherence reaches chance plus the margin.
pub fn ablate_strategies(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let prep = prepare(cfg)?;
    let base = ensure_base(cfg, &prep)?;
    let sc = &cfg.strategies;
    let eval = &prep.eval[..sc.eval_scenes.min(prep.eval.len())];
    let chances = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, chance_row(cfg, &prep, &base, s, eval)?.spatial)))
        .collect::<Result<BTreeMap<u64, f64>>>()?;
    let cells: Vec<((bool, f64), u64)> = sc.conditions.iter().flat_map(|&c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let runs = parallel_map(&cells, cfg.jobs, |&((bias, lambda), seed)| {
        let chance = chances[&seed];
        let target = chance + sc.margin;
        let mut model = Model::with_variant(&base, VariantTag::Siam, seed)?;
        let tcfg = TrainConfig {
            lambda_region: lambda,
            timesteps: if bias { TimestepSampler::biased() } else { TimestepSampler::default() },
            ..cfg.layout_cfg(seed)
        };
        let mut trainer = Trainer::new(&tcfg)?;
        let mut metrics = Vec::new();
        let mut curve = Vec::new();
        let mut reached = None;
        while trainer.steps_done() < sc.max_steps {
            metrics.push(trainer.step(&mut model, &prep.train, &prep.schedule)?);
            let done = trainer.steps_done();
            if done % sc.eval_every == 0 {
                let row = benchmark(&model, "siam", &prep.schedule, eval, cfg.sample_steps, &[seed], &cfg.oracle)?;
                let spatial = row.rows[0].spatial;
                curve.push((done, spatial));
                if spatial >= target {
                    reached = Some(done);
                    break;
                }
            }
        }
        let run = ConvergenceRun {
            bias,
            lambda_region: lambda,
            seed,
            chance,
            target,
            steps_to_threshold: reached,
            curve,
        };
        let dir = cfg.root().join("strategies").join(condition_name(bias, lambda)).join(seed.to_string());
        std::fs::create_dir_all(&dir)?;
        write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
        let mut m = Manifest::new("ablate-strategies", cfg, "siam", seed)?;
        m.inputs = vec![rel(cfg, &cfg.base_checkpoint())];
        m.outputs = vec!["metrics.csv".into(), "run.json".into()];
        m.write(&dir)?;
        Ok::<_, Error>(run)
    })?;
    let report = ConvergenceReport { runs };
    let dir = cfg.root().join("strategies");
    std::fs::write(dir.join("convergence.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut m = Manifest::new("ablate-strategies", cfg, "siam", cfg.seeds.first().copied().unwrap_or(0))?;
    m.outputs = vec!["convergence.json".into()];
    m.write(&dir)?;
    Ok(report)
}
