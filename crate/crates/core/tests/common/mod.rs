//! Checks shared by the focused test targets and the acceptance runner.
#![allow(dead_code)]

use mmlayout::diffusion::{loss_graph, region_mask};
use mmlayout::encoders::{BBox, Entity, Layout, PAD};
use mmlayout::layoutkit::Mask;
use mmlayout::mmdit::{ForwardInput, ForwardOptions, LoraTarget, Model, ModelConfig, VariantTag};
use mmlayout::numcore::{grad_check, grad_check_sampled, Graph, Tensor, Var};
use mmlayout::rng::{normal, uniform, SeedStream};
use mmlayout::Result;

pub const VARIANTS: [VariantTag; 5] = [
    VariantTag::Base,
    VariantTag::Adapter,
    VariantTag::M3,
    VariantTag::Siam,
    VariantTag::SiamLora { rank: 4 },
];

fn randn(r: usize, c: usize, seed: u64) -> Tensor {
    Tensor::randn(&[r, c], 1.0, &mut SeedStream::new(seed).rng())
}

/// `sum(y ⊙ W)` with a fixed random `W`, so every output entry matters.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(y);
    let w = g.constant(r, c, randn(r, c, seed).data().to_vec())?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>);

/// Worst relative gradient error of every primitive op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![randn(3, 4, 1), randn(4, 5, 2)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("matmul_nt", vec![randn(3, 4, 1), randn(5, 4, 2)], Box::new(|g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("add", vec![randn(3, 4, 1), randn(3, 4, 2)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("sub", vec![randn(3, 4, 1), randn(3, 4, 2)], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("mul", vec![randn(3, 4, 1), randn(3, 4, 2)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("add_row", vec![randn(3, 4, 1), randn(1, 4, 2)], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("mul_row", vec![randn(3, 4, 1), randn(1, 4, 2)], Box::new(|g, v| {
            let y = g.mul_row(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("scale", vec![randn(3, 4, 1)], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7)?;
            project(g, y, 9)
        })),
        ("layer_norm", vec![randn(3, 6, 1)], Box::new(|g, v| {
            let y = g.layer_norm(v[0])?;
            project(g, y, 9)
        })),
        ("gelu", vec![randn(3, 4, 1)], Box::new(|g, v| {
            let y = g.gelu(v[0])?;
            project(g, y, 9)
        })),
        ("softmax_rows", vec![randn(3, 5, 1)], Box::new(|g, v| {
            let y = g.softmax_rows(v[0])?;
            project(g, y, 9)
        })),
        ("concat_rows", vec![randn(2, 4, 1), randn(3, 4, 2)], Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            project(g, y, 9)
        })),
        ("slice_rows", vec![randn(5, 4, 1)], Box::new(|g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            project(g, y, 9)
        })),
        ("concat_cols", vec![randn(3, 2, 1), randn(3, 4, 2)], Box::new(|g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            project(g, y, 9)
        })),
        ("slice_cols", vec![randn(3, 6, 1)], Box::new(|g, v| {
            let y = g.slice_cols(v[0], 2, 3)?;
            project(g, y, 9)
        })),
        ("gather_rows", vec![randn(5, 3, 1)], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
            project(g, y, 9)
        })),
        ("mean_rows", vec![randn(5, 3, 1)], Box::new(|g, v| {
            let y = g.mean_rows(v[0], &[vec![0, 1], vec![4], vec![1, 2, 3]])?;
            project(g, y, 9)
        })),
        ("mean_all", vec![randn(3, 4, 1)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean_all(y)
        })),
        ("sum_all", vec![randn(3, 4, 1)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum_all(y)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| (name, grad_check(&params, 1e-5, |g, v| f(g, v)).unwrap()))
        .collect()
}

/// Every tensor nudged off its initial value so zero-initialised paths
/// carry gradient.
pub fn perturbed(cfg: &ModelConfig, variant: VariantTag, seed: u64) -> Model {
    let base = Model::new_base(cfg.clone(), seed).unwrap();
    let mut m = Model::with_variant(&base, variant, seed + 1).unwrap();
    let mut rng = SeedStream::new(seed + 2).rng();
    for id in m.params.ids().collect::<Vec<_>>() {
        for v in m.params.get_mut(id).data_mut() {
            *v += 0.2 * normal(&mut rng);
        }
    }
    m
}

pub fn two_entity_layout() -> Layout {
    Layout {
        caption: vec![1, 12, 16, 0],
        entities: vec![
            Entity {
                caption: vec![12, 16],
                bbox: BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
            },
            Entity {
                caption: vec![13, 0],
                bbox: BBox::new(0.4, 0.5, 1.0, 0.9).unwrap(),
            },
        ],
    }
}

/// Full-model batch loss (region term on, λ = 2) gradient error against
/// finite differences over `per_param` sampled entries of every tensor.
pub fn model_gradient_error(variant: VariantTag, batch: usize, per_param: usize) -> f64 {
    let cfg = ModelConfig::tiny();
    let m = perturbed(&cfg, variant, 5);
    let mut rng = SeedStream::new(8).rng();
    let shape = [cfg.image_tokens(), cfg.patch_dim()];
    let items: Vec<(Tensor, Tensor, usize)> = (0..batch)
        .map(|i| (Tensor::randn(&shape, 1.0, &mut rng), Tensor::randn(&shape, 1.0, &mut rng), 150 + 300 * i))
        .collect();
    let lay = two_entity_layout();
    let mask = region_mask(lay.entities.iter().map(|e| &e.bbox), cfg.grid());
    let params: Vec<Tensor> = m.params.entries().iter().map(|e| e.tensor.clone()).collect();
    grad_check_sampled(&params, 1e-5, per_param, 3, |g, vars| {
        let mut totals = Vec::new();
        for (tokens, target, t) in &items {
            let out = m.forward(
                g,
                vars,
                ForwardInput {
                    tokens,
                    t: *t,
                    layout: &lay,
                },
                ForwardOptions::default(),
            )?;
            let tv = g.constant(shape[0], shape[1], target.data().to_vec())?;
            totals.push(loss_graph(g, out.eps, tv, &mask, 2.0)?.0);
        }
        let stacked = g.concat_rows(&totals)?;
        g.mean_all(stacked)
    })
    .unwrap()
}

/// Independent scan: collect set cells, take min/max of their corner
/// coordinates directly.
pub fn scan(m: &Mask) -> [f64; 4] {
    let set: Vec<(usize, usize)> = m.cells.iter().enumerate().filter(|(_, &c)| c).map(|(k, _)| (k / m.cols, k % m.cols)).collect();
    let xs0 = set.iter().map(|&(_, j)| j as f64 / m.cols as f64);
    let xs1 = set.iter().map(|&(_, j)| (j + 1) as f64 / m.cols as f64);
    let ys0 = set.iter().map(|&(i, _)| i as f64 / m.rows as f64);
    let ys1 = set.iter().map(|&(i, _)| (i + 1) as f64 / m.rows as f64);
    [
        xs0.fold(f64::INFINITY, f64::min),
        ys0.fold(f64::INFINITY, f64::min),
        xs1.fold(0.0, f64::max),
        ys1.fold(0.0, f64::max),
    ]
}

pub fn random_mask(rng: &mut impl rand::Rng) -> Mask {
    let rows = rng.gen_range(1..=24);
    let cols = rng.gen_range(1..=24);
    let density = rng.gen_range(0.005..0.3);
    let mut cells: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(density)).collect();
    if !cells.iter().any(|&c| c) {
        let k = rng.gen_range(0..cells.len());
        cells[k] = true;
    }
    Mask::new(rows, cols, cells).unwrap()
}

/// Random image tokens and a layout of `n` entities with in-vocabulary ids.
pub fn random_input(cfg: &ModelConfig, n: usize, seed: u64) -> (Tensor, Layout) {
    let mut rng = SeedStream::new(seed).substream("input").rng();
    let tokens = Tensor::randn(&[cfg.image_tokens(), cfg.patch_dim()], 1.0, &mut rng);
    let word = |rng: &mut mmlayout::rng::Rng| 1 + (uniform(rng) * (cfg.vocab_size - 1) as f64) as usize;
    let mut caption: Vec<usize> = (0..cfg.text.caption_len).map(|_| word(&mut rng)).collect();
    *caption.last_mut().unwrap() = PAD;
    let entities = (0..n)
        .map(|_| {
            let (x0, y0) = (uniform(&mut rng) * 0.5, uniform(&mut rng) * 0.5);
            let (x1, y1) = (x0 + 0.1 + uniform(&mut rng) * 0.4, y0 + 0.1 + uniform(&mut rng) * 0.4);
            let mut words: Vec<usize> = (0..cfg.text.region_len).map(|_| word(&mut rng)).collect();
            if n > 1 {
                words[cfg.text.region_len - 1] = PAD;
            }
            Entity {
                caption: words,
                bbox: BBox::new(x0, y0, x1, y1).unwrap(),
            }
        })
        .collect();
    (tokens, Layout { caption, entities })
}

/// Predicted noise for one input, with attention rows checked to sum to one.
pub fn tape(model: &Model, tokens: &Tensor, t: usize, layout: &Layout, active: bool) -> Vec<f64> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g).unwrap();
    let out = model
        .forward(
            &mut g,
            &bound,
            ForwardInput { tokens, t, layout },
            ForwardOptions {
                layout_active: active,
                capture: true,
            },
        )
        .unwrap();
    for a in &out.attention {
        for row in a.probs.chunks(a.cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    g.value(out.eps).to_vec()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of a freshly attached variant from the base it was
/// built on, over `pairs` random inputs with 0 to `max_entities` entities.
pub fn init_deviation(variant: VariantTag, pairs: usize) -> f64 {
    let cfg = ModelConfig::tiny();
    let mut base = Model::new_base(cfg.clone(), 31).unwrap();
    let mut rng = SeedStream::new(32).rng();
    // A trained-looking base: zero-initialised output gates would otherwise
    // make every comparison trivially zero.
    for id in base.params.ids().collect::<Vec<_>>() {
        for v in base.params.get_mut(id).data_mut() {
            *v += 0.3 * normal(&mut rng);
        }
    }
    let m = Model::with_variant(&base, variant, 33).unwrap();
    (0..pairs)
        .map(|i| {
            let n = i % (cfg.text.max_entities + 1);
            let (tokens, layout) = random_input(&cfg, n, 1000 + i as u64);
            let t = 1 + (i * 97) % 1000;
            max_abs_diff(&tape(&m, &tokens, t, &layout, true), &tape(&base, &tokens, t, &layout, true))
        })
        .fold(0.0, f64::max)
}

/// `(B = 0 deviation, merged vs factored deviation)` for a LoRA-wrapped
/// Siam model.
pub fn lora_deviations() -> (f64, f64) {
    let cfg = ModelConfig::tiny();
    let base = Model::new_base(cfg.clone(), 21).unwrap();
    let siam = perturbed_from(&base, VariantTag::Siam, 23);
    let (tokens, layout) = random_input(&cfg, 3, 24);
    let before = tape(&siam, &tokens, 300, &layout, true);
    let mut wrapped = siam.clone();
    wrapped.lora_wrap(2, &LoraTarget::ALL).unwrap();
    let zero_b = max_abs_diff(&before, &tape(&wrapped, &tokens, 300, &layout, true));
    let mut rng = SeedStream::new(25).rng();
    for id in wrapped.trainable_ids() {
        if wrapped.params.entry(id).name.contains("lora") {
            for v in wrapped.params.get_mut(id).data_mut() {
                *v += 0.2 * normal(&mut rng);
            }
        }
    }
    let factored = tape(&wrapped, &tokens, 300, &layout, true);
    assert!(max_abs_diff(&factored, &before) > 0.0);
    let merged = tape(&wrapped.merge_lora().unwrap(), &tokens, 300, &layout, true);
    (zero_b, max_abs_diff(&factored, &merged))
}

fn perturbed_from(base: &Model, variant: VariantTag, seed: u64) -> Model {
    let mut m = Model::with_variant(base, variant, seed).unwrap();
    let mut rng = SeedStream::new(seed).substream("perturb").rng();
    for id in m.params.ids().collect::<Vec<_>>() {
        for v in m.params.get_mut(id).data_mut() {
            *v += 0.3 * normal(&mut rng);
        }
    }
    m
}
