use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{patchify, Layout};
use crate::error::{invalid, Result};
use crate::mmdit::{ForwardInput, ForwardOptions, Model, VariantTag};
use crate::numcore::{Graph, Tensor};
use crate::params::ParamId;
use crate::rng::{normal_vec, uniform_int, SeedStream};

use super::loss::{loss_graph, region_mask};
use super::optim::{Optimizer, OptimizerKind};
use super::schedule::{Schedule, TimestepSampler};

/// One training pair in model space: image tokens scaled to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub tokens: Tensor,
    pub layout: Layout,
    pub mask: Vec<bool>,
}

impl TrainExample {
    /// From a `[3, H, W]` image with values in `[0, 1]`.
    pub fn new(image: &Tensor, layout: Layout, patch: usize) -> Result<Self> {
        let scaled = Tensor::new(image.shape().to_vec(), image.data().iter().map(|v| 2.0 * v - 1.0).collect())?;
        let tokens = patchify(&scaled, patch)?;
        let grid = image.shape()[1] / patch;
        let mask = region_mask(layout.entities.iter().map(|e| &e.bbox), grid);
        Ok(Self { tokens, layout, mask })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub lambda_region: f64,
    pub timesteps: TimestepSampler,
    pub seed: u64,
    /// Diagnostics probe interval in steps; 0 disables probing.
    pub probe_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 5e-4,
            optimizer: OptimizerKind::Adam,
            lambda_region: 2.0,
            timesteps: TimestepSampler::biased(),
            seed: 0,
            probe_every: 250,
        }
    }
}

/// Attention-similarity readings taken by a probe.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProbeValues {
    pub sim_text: Option<f64>,
    pub sim_layout: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Updates applied before this step.
    pub step: u64,
    pub l_layout: f64,
    pub l_region: f64,
    pub l_total: f64,
    pub probe: Option<ProbeValues>,
}

pub type Probe<'p> = dyn FnMut(&Model) -> Result<ProbeValues> + 'p;

/// Base pretraining on captions. The region term is not used here.
pub fn pretrain_base(
    model: &mut Model,
    data: &[TrainExample],
    cfg: &TrainConfig,
    schedule: &Schedule,
) -> Result<Vec<StepMetrics>> {
    if model.variant != VariantTag::Base {
        return Err(invalid("pretraining runs on the base variant"));
    }
    let cfg = TrainConfig {
        lambda_region: 0.0,
        ..cfg.clone()
    };
    run(model, data, &cfg, schedule, None)
}

/// Layout-phase training: only the variant's additions update.
pub fn train_layout(
    model: &mut Model,
    data: &[TrainExample],
    cfg: &TrainConfig,
    schedule: &Schedule,
    probe: Option<&mut Probe<'_>>,
) -> Result<Vec<StepMetrics>> {
    if model.variant == VariantTag::Base {
        return Err(invalid("layout training needs a layout variant, not base"));
    }
    run(model, data, cfg, schedule, probe)
}

fn run(
    model: &mut Model,
    data: &[TrainExample],
    cfg: &TrainConfig,
    schedule: &Schedule,
    mut probe: Option<&mut Probe<'_>>,
) -> Result<Vec<StepMetrics>> {
    let mut trainer = Trainer::new(cfg)?;
    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let probed = match probe.as_deref_mut() {
            Some(p) if cfg.probe_every > 0 && step % cfg.probe_every == 0 => Some(p(model)?),
            _ => None,
        };
        let mut m = trainer.step(model, data, schedule)?;
        m.probe = probed;
        metrics.push(m);
    }
    if let Some(p) = probe {
        if cfg.probe_every > 0 && cfg.steps.is_multiple_of(cfg.probe_every) {
            // Reading after the final update, with no loss of its own.
            metrics.push(StepMetrics {
                step: cfg.steps,
                l_layout: f64::NAN,
                l_region: f64::NAN,
                l_total: f64::NAN,
                probe: Some(p(model)?),
            });
        }
    }
    Ok(metrics)
}

/// Stepwise training loop that keeps optimizer state between calls, for
/// callers that interleave their own evaluation. `cfg.steps` is ignored.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    opt: Optimizer,
    stream: SeedStream,
    done: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        if cfg.batch == 0 {
            return Err(invalid("training needs a positive batch size"));
        }
        if cfg.lambda_region < 0.0 {
            return Err(invalid("lambda_region must be non-negative"));
        }
        Ok(Self {
            cfg: cfg.clone(),
            opt: Optimizer::new(cfg.optimizer, cfg.lr),
            stream: SeedStream::new(cfg.seed).substream("train"),
            done: 0,
        })
    }

    /// Updates applied so far.
    pub fn steps_done(&self) -> u64 {
        self.done
    }

    pub fn step(&mut self, model: &mut Model, data: &[TrainExample], schedule: &Schedule) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(invalid("training needs data"));
        }
        let mut m = train_step(model, data, &self.cfg, schedule, &mut self.opt, self.stream.index(self.done))?;
        m.step = self.done;
        self.done += 1;
        Ok(m)
    }
}

/// One optimizer update on a freshly drawn batch.
pub fn train_step(
    model: &mut Model,
    data: &[TrainExample],
    cfg: &TrainConfig,
    schedule: &Schedule,
    opt: &mut Optimizer,
    stream: SeedStream,
) -> Result<StepMetrics> {
    let mut rng = stream.rng();
    let grads: Vec<(ParamId, Vec<f64>)>;
    let (mut sl, mut sr, mut st) = (0.0, 0.0, 0.0);
    {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g)?;
        let mut totals = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let ex = &data[uniform_int(&mut rng, 0, data.len() - 1)];
            let (t, _) = cfg.timesteps.sample(schedule.t_max(), &mut rng);
            let eps = normal_vec(&mut rng, ex.tokens.len());
            let zt = schedule.q_sample(ex.tokens.data(), t, &eps)?;
            let (r, c) = ex.tokens.as_matrix_dims();
            let zt = Tensor::matrix(r, c, zt)?;
            let out = model.forward(
                &mut g,
                &bound,
                ForwardInput {
                    tokens: &zt,
                    t,
                    layout: &ex.layout,
                },
                ForwardOptions::default(),
            )?;
            let target = g.constant(r, c, eps)?;
            let (total, layout, region) = loss_graph(&mut g, out.eps, target, &ex.mask, cfg.lambda_region)?;
            sl += g.scalar(layout)?;
            sr += region.map_or(Ok(0.0), |v| g.scalar(v))?;
            st += g.scalar(total)?;
            totals.push(total);
        }
        let stacked = g.concat_rows(&totals)?;
        let root = g.mean_all(stacked)?;
        let back = g.backward(root)?;
        grads = model
            .trainable_ids()
            .into_iter()
            .filter_map(|id| back.get(bound[id.0]).map(|gr| (id, gr.to_vec())))
            .collect();
    }
    opt.step(&mut model.params, &grads);
    let b = cfg.batch as f64;
    Ok(StepMetrics {
        step: 0,
        l_layout: sl / b,
        l_region: sr / b,
        l_total: st / b,
        probe: None,
    })
}

/// `step,l_layout,l_region,l_total,sim_text,sim_layout`; blank cells for
/// values that were not measured.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,l_layout,l_region,l_total,sim_text,sim_layout")?;
    let cell = |v: Option<f64>| v.filter(|x| x.is_finite()).map(|x| format!("{x:.6e}")).unwrap_or_default();
    for m in metrics {
        let p = m.probe.unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.step,
            cell(Some(m.l_layout)),
            cell(Some(m.l_region)),
            cell(Some(m.l_total)),
            cell(p.sim_text),
            cell(p.sim_layout)
        )?;
    }
    w.flush()?;
    Ok(())
}
