use serde::{Deserialize, Serialize};

use crate::encoders::{BBox, Entity, Layout, PAD};
use crate::error::Result;
use crate::mmdit::{ForwardInput, ForwardOptions, LoraSpec, LoraTarget, Model, ModelConfig, VariantTag};
use crate::numcore::{Graph, Tensor};

/// Parameters and one-step MACs of a variant relative to its backbone.
/// One MAC is one multiply-accumulate inside a matrix product; softmax,
/// normalisation and activations are not counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: String,
    pub entities: usize,
    pub base_params: u64,
    pub extra_params: u64,
    pub param_ratio: f64,
    pub base_macs: u64,
    pub extra_macs: u64,
    pub mac_ratio: f64,
}

impl CostReport {
    fn new(variant: VariantTag, n: usize, bp: u64, ep: u64, bm: u64, em: u64) -> Self {
        Self {
            variant: variant.name(),
            entities: n,
            base_params: bp,
            extra_params: ep,
            param_ratio: ep as f64 / bp as f64,
            base_macs: bm,
            extra_macs: em,
            mac_ratio: em as f64 / bm as f64,
        }
    }
}

/// Closed-form counts.
pub fn count_costs(cfg: &ModelConfig, variant: VariantTag, n: usize, lora: Option<&LoraSpec>) -> CostReport {
    let u = |x: usize| x as u64;
    let (d, tz, tp, pd) = (u(cfg.dim), u(cfg.image_tokens()), u(cfg.text.caption_len), u(cfg.patch_dim()));
    let blocks = u(cfg.depth);
    let n = u(n);
    let lin = |i: u64, o: u64| i * o + o;
    let stream_params = lin(d, 6 * d) + 4 * lin(d, d) + lin(d, 4 * d) + lin(4 * d, d);

    let base_params = lin(pd, d) + 2 * lin(d, d) + u(cfg.vocab_size) * d + blocks * 2 * stream_params + lin(d, 2 * d) + lin(d, pd);
    let t_all = tz + tp;
    let base_block_macs = 2 * 6 * d * d + 12 * d * d * t_all + 2 * t_all * t_all * d;
    let base_macs = tz * pd * d + 2 * d * d + blocks * base_block_macs + 2 * d * d + tz * d * pd;

    let f = u(cfg.fourier_freqs);
    let encoder_params = lin(d + 8 * f, d) + lin(d, d);
    let encoder_macs = n * (d + 8 * f) * d + n * d * d;
    // Low-rank factor cost for `rows` tokens through a `i -> o` layer.
    let lr = |r: u64, rows: u64, i: u64, o: u64| (r * (i + o), rows * r * (i + o));

    let (per_block_params, per_block_macs) = match variant {
        VariantTag::Base => (0, 0),
        VariantTag::Adapter => (3 * lin(d, d), 2 * n * d * d + 2 * tz * n * d + tz * d * d),
        VariantTag::M3 => {
            let attn = 2 * (t_all + n) * (t_all + n) * d - 2 * t_all * t_all * d;
            (stream_params, 6 * d * d + 12 * n * d * d + attn)
        }
        VariantTag::Siam | VariantTag::SiamLora { .. } => {
            let branch_macs = 3 * tz * d * d + 6 * d * d + 12 * n * d * d + 2 * (tz + n) * (tz + n) * d;
            match (variant, lora) {
                (VariantTag::SiamLora { rank }, _) => {
                    let r = u(rank);
                    let mut p = 0;
                    let mut m = branch_macs;
                    for (rows, i, o, count) in [(tz, d, d, 3), (n, d, d, 4), (n, d, 4 * d, 1)] {
                        let (lp, lm) = lr(r, rows, i, o);
                        p += count * lp;
                        m += count * lm;
                    }
                    let (dp, dm) = lr(r, tz, d, d);
                    (p + dp, m + dm)
                }
                (_, Some(spec)) => {
                    let r = u(spec.rank);
                    let has = |t: LoraTarget| spec.targets.contains(&t);
                    let mut p = 3 * lin(d, d) + stream_params + d * d + d;
                    let mut m = branch_macs + tz * d * d;
                    let mut add = |rows: u64, i: u64, o: u64, count: u64| {
                        let (lp, lm) = lr(r, rows, i, o);
                        p += count * lp;
                        m += count * lm;
                    };
                    if has(LoraTarget::Linear1) {
                        add(tz, d, d, 3);
                        add(n, d, d, 3);
                    }
                    if has(LoraTarget::Linear2) {
                        add(n, d, d, 1);
                        add(tz, d, d, 1);
                    }
                    if has(LoraTarget::Mlp1) {
                        add(n, d, 4 * d, 1);
                    }
                    (p, m)
                }
                _ => (3 * lin(d, d) + stream_params + lin(d, d), branch_macs + tz * d * d),
            }
        }
    };
    let (extra_params, extra_macs) = if variant == VariantTag::Base {
        (0, 0)
    } else {
        let macs = if n == 0 { 0 } else { encoder_macs + blocks * per_block_macs };
        (encoder_params + blocks * per_block_params, macs)
    };
    CostReport::new(variant, n as usize, base_params, extra_params, base_macs, extra_macs)
}

/// Layout with `n` entities and full-length captions, for counting.
pub fn counting_layout(cfg: &ModelConfig, n: usize) -> Result<Layout> {
    let caption = vec![1; cfg.text.caption_len];
    let entities = (0..n)
        .map(|i| {
            let mut words = vec![PAD; cfg.text.region_len];
            words[0] = 1 + i % (cfg.vocab_size - 1);
            let x = (i % 10) as f64 * 0.09;
            Ok(Entity {
                caption: words,
                bbox: BBox::new(x, 0.1, x + 0.1, 0.5)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Layout { caption, entities })
}

/// Counts read from a built model and the graph's MAC counter.
pub fn instrumented_costs(model: &Model, n: usize) -> Result<CostReport> {
    let cfg = &model.config;
    let layout = counting_layout(cfg, n)?;
    let tokens = Tensor::zeros(&[cfg.image_tokens(), cfg.patch_dim()]);
    let macs = |layout_active: bool| -> Result<u64> {
        let mut g = Graph::inference();
        let bound = model.params.bind(&mut g)?;
        model.forward(
            &mut g,
            &bound,
            ForwardInput {
                tokens: &tokens,
                t: 500,
                layout: &layout,
            },
            ForwardOptions {
                layout_active,
                capture: false,
            },
        )?;
        Ok(g.macs())
    };
    let (total, base) = (macs(true)?, macs(false)?);
    Ok(CostReport::new(
        model.variant,
        n,
        model.base_param_count() as u64,
        model.extra_param_count() as u64,
        base,
        total - base,
    ))
}
