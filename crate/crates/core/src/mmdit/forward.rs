use std::ops::Range;

use crate::encoders::{grid_positions, sequence_positions, Layout};
use crate::error::{invalid, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::Linear;

use super::config::VariantTag;
use super::weights::{DeltaProj, LayoutBlock, StreamWeights};
use super::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
    Layout,
}

/// Post-softmax probabilities of one head of one attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    /// Rows holding image queries.
    pub query: Range<usize>,
    /// Key columns owned by each modality.
    pub keys: Vec<(Modality, Range<usize>)>,
    pub probs: Vec<f64>,
}

/// One denoising query: noisy image tokens `[T_z, 3p²]`, timestep and
/// tokenised layout.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'x> {
    pub tokens: &'x Tensor,
    pub t: usize,
    pub layout: &'x Layout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// `false` bypasses every layout path.
    pub layout_active: bool,
    pub capture: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            layout_active: true,
            capture: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Predicted noise tokens `[T_z, 3p²]`.
    pub eps: Var,
    /// Layout-path invocations: the encoder plus one per block.
    pub layout_calls: usize,
    pub attention: Vec<AttentionMap>,
}

/// AdaLN outputs for one stream: shift/scale/gate for attention, then MLP.
struct Modulation {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
}

impl Modulation {
    fn new(g: &mut Graph<'_>, bound: &[Var], ada: &Linear, c: Var, ones: Var) -> Result<Self> {
        let m = ada.apply(g, bound, c)?;
        let d = g.shape(ones).1;
        let mut part = |i: usize| g.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1) = (part(0)?, part(1)?, part(2)?);
        let (shift2, scale2, gate2) = (part(3)?, part(4)?, part(5)?);
        Ok(Self {
            shift1,
            scale1: g.add(scale1, ones)?,
            gate1,
            shift2,
            scale2: g.add(scale2, ones)?,
            gate2,
        })
    }
}

fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let n = g.mul_row(n, scale)?;
    g.add_row(n, shift)
}

struct Projected {
    q: Var,
    k: Var,
    v: Var,
    rows: usize,
}

fn project(g: &mut Graph<'_>, bound: &[Var], q: &Linear, k: &Linear, v: &Linear, x: Var) -> Result<Projected> {
    Ok(Projected {
        q: q.apply(g, bound, x)?,
        k: k.apply(g, bound, x)?,
        v: v.apply(g, bound, x)?,
        rows: g.shape(x).0,
    })
}

/// Multi-head scaled dot-product attention. Pushes each head's
/// probabilities into `probs` when given.
fn attention(
    g: &mut Graph<'_>,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
    mut probs: Option<&mut Vec<Vec<f64>>>,
) -> Result<Var> {
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let p = g.softmax_rows(s)?;
        if let Some(store) = probs.as_deref_mut() {
            store.push(g.value(p).to_vec());
        }
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

struct Ctx<'o> {
    heads: usize,
    block: usize,
    capture: Option<&'o mut Vec<AttentionMap>>,
}

impl Ctx<'_> {
    /// Joint attention over the concatenated streams; returns per-stream
    /// outputs in input order.
    fn joint(&mut self, g: &mut Graph<'_>, streams: &[(Modality, &Projected)]) -> Result<Vec<Var>> {
        let cat = |g: &mut Graph<'_>, f: fn(&Projected) -> Var| {
            let parts: Vec<Var> = streams.iter().map(|(_, p)| f(p)).collect();
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                g.concat_rows(&parts)
            }
        };
        let q = cat(g, |p| p.q)?;
        let k = cat(g, |p| p.k)?;
        let v = cat(g, |p| p.v)?;
        let mut spans = Vec::with_capacity(streams.len());
        let mut at = 0;
        for (m, p) in streams {
            spans.push((*m, at..at + p.rows));
            at += p.rows;
        }
        let mut probs = self.capture.is_some().then(Vec::new);
        let out = attention(g, self.heads, q, k, v, probs.as_mut())?;
        if let (Some(store), Some(probs)) = (self.capture.as_deref_mut(), probs) {
            let query = spans
                .iter()
                .find(|(m, _)| *m == Modality::Image)
                .map(|(_, r)| r.clone())
                .unwrap_or(0..0);
            for (head, p) in probs.into_iter().enumerate() {
                store.push(AttentionMap {
                    block: self.block,
                    head,
                    rows: at,
                    cols: at,
                    query: query.clone(),
                    keys: spans.clone(),
                    probs: p,
                });
            }
        }
        if streams.len() == 1 {
            return Ok(vec![out]);
        }
        spans
            .iter()
            .map(|(_, r)| g.slice_rows(out, r.start, r.len()))
            .collect()
    }

    /// Image queries against layout keys and values.
    fn cross(&mut self, g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        let mut probs = self.capture.is_some().then(Vec::new);
        let out = attention(g, self.heads, q, k, v, probs.as_mut())?;
        if let (Some(store), Some(probs)) = (self.capture.as_deref_mut(), probs) {
            let (rows, cols) = (g.shape(q).0, g.shape(k).0);
            for (head, p) in probs.into_iter().enumerate() {
                store.push(AttentionMap {
                    block: self.block,
                    head,
                    rows,
                    cols,
                    query: 0..rows,
                    keys: vec![(Modality::Layout, 0..cols)],
                    probs: p,
                });
            }
        }
        Ok(out)
    }
}

/// `x + gate·o(a)`.
fn attn_residual(g: &mut Graph<'_>, bound: &[Var], o: &Linear, x: Var, a: Var, gate: Var) -> Result<Var> {
    let y = o.apply(g, bound, a)?;
    let y = g.mul_row(y, gate)?;
    g.add(x, y)
}

/// `x + gate·mlp2(gelu(mlp1(modulated x)))`.
fn mlp_residual(g: &mut Graph<'_>, bound: &[Var], s: &StreamWeights, m: &Modulation, x: Var) -> Result<Var> {
    let h = modulate(g, x, m.shift2, m.scale2)?;
    let h = s.mlp1.apply(g, bound, h)?;
    let h = g.gelu(h)?;
    let h = s.mlp2.apply(g, bound, h)?;
    let h = g.mul_row(h, m.gate2)?;
    g.add(x, h)
}

/// Sinusoidal embedding of an integer timestep.
pub(crate) fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = 1.0 / 10_000f64.powf(i as f64 / half as f64);
        out[i] = (t as f64 * omega).sin();
        out[half + i] = (t as f64 * omega).cos();
    }
    out
}

impl Model {
    /// Noise prediction for one sample on `g`. `bound` must come from
    /// `self.params.bind`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        bound: &[Var],
        input: ForwardInput<'_>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let d = cfg.dim;
        let tz = cfg.image_tokens();
        if input.tokens.shape() != [tz, cfg.patch_dim()] {
            return Err(invalid(format!(
                "image tokens {:?} do not match the {}x{} grid",
                input.tokens.shape(),
                tz,
                cfg.patch_dim()
            )));
        }
        if input.layout.caption.len() != cfg.text.caption_len {
            return Err(invalid(format!(
                "caption has {} ids, expected {}",
                input.layout.caption.len(),
                cfg.text.caption_len
            )));
        }
        let base = &self.base;
        let mut layout_calls = 0;

        let x = g.constant(tz, cfg.patch_dim(), input.tokens.data().to_vec())?;
        let z = base.patch_embed.apply(g, bound, x)?;
        let pos = g.constant(tz, d, grid_positions(cfg.grid(), cfg.grid(), d))?;
        let mut z = g.add(z, pos)?;

        let table = bound[base.caption_table.0];
        let p = g.gather_rows(table, &input.layout.caption)?;
        let pos = g.constant(cfg.text.caption_len, d, sequence_positions(cfg.text.caption_len, d))?;
        let mut p = g.add(p, pos)?;

        let tf = g.constant(1, d, timestep_features(input.t, d))?;
        let c = base.t_fc1.apply(g, bound, tf)?;
        let c = g.gelu(c)?;
        let c = base.t_fc2.apply(g, bound, c)?;
        let c = g.gelu(c)?;
        let ones = g.constant(1, d, vec![1.0; d])?;

        let layout_on = opts.layout_active && self.variant != VariantTag::Base && !input.layout.entities.is_empty();
        let mut l = match (&self.layout, layout_on) {
            (Some(lw), true) => {
                layout_calls += 1;
                lw.encoder.tokens(g, bound, table, &input.layout.entities)?
            }
            _ => None,
        };

        let mut capture = opts.capture.then(Vec::new);
        for (b, bw) in base.blocks.iter().enumerate() {
            let mut ctx = Ctx {
                heads: cfg.heads,
                block: b,
                capture: capture.as_mut(),
            };
            let lb = match (&self.layout, l) {
                (Some(lw), Some(lv)) => Some((&lw.blocks[b], lv)),
                _ => None,
            };
            let mz = Modulation::new(g, bound, &bw.image.ada, c, ones)?;
            let mp = Modulation::new(g, bound, &bw.text.ada, c, ones)?;
            let xz = modulate(g, z, mz.shift1, mz.scale1)?;
            let xp = modulate(g, p, mp.shift1, mp.scale1)?;
            let pz = project(g, bound, &bw.image.q, &bw.image.k, &bw.image.v, xz)?;
            let pp = project(g, bound, &bw.text.q, &bw.text.k, &bw.text.v, xp)?;

            if let Some((LayoutBlock::M3 { layout }, lv)) = lb {
                layout_calls += 1;
                let ml = Modulation::new(g, bound, &layout.ada, c, ones)?;
                let xl = modulate(g, lv, ml.shift1, ml.scale1)?;
                let pl = project(g, bound, &layout.q, &layout.k, &layout.v, xl)?;
                let a = ctx.joint(
                    g,
                    &[(Modality::Image, &pz), (Modality::Text, &pp), (Modality::Layout, &pl)],
                )?;
                let z1 = attn_residual(g, bound, &bw.image.o, z, a[0], mz.gate1)?;
                let p1 = attn_residual(g, bound, &bw.text.o, p, a[1], mp.gate1)?;
                let l1 = attn_residual(g, bound, &layout.o, lv, a[2], ml.gate1)?;
                z = mlp_residual(g, bound, &bw.image, &mz, z1)?;
                p = mlp_residual(g, bound, &bw.text, &mp, p1)?;
                l = Some(mlp_residual(g, bound, layout, &ml, l1)?);
                continue;
            }

            let a = ctx.joint(g, &[(Modality::Image, &pz), (Modality::Text, &pp)])?;
            let mut z1 = attn_residual(g, bound, &bw.image.o, z, a[0], mz.gate1)?;
            match lb {
                Some((LayoutBlock::Adapter { k, v, out: proj }, lv)) => {
                    layout_calls += 1;
                    let nl = g.layer_norm(lv)?;
                    let kl = k.apply(g, bound, nl)?;
                    let vl = v.apply(g, bound, nl)?;
                    let cross = ctx.cross(g, pz.q, kl, vl)?;
                    let delta = proj.apply(g, bound, cross)?;
                    z1 = g.add(z1, delta)?;
                }
                Some((
                    LayoutBlock::Siam {
                        q,
                        k,
                        v,
                        layout,
                        delta,
                    },
                    lv,
                )) => {
                    layout_calls += 1;
                    let pz2 = project(g, bound, q, k, v, xz)?;
                    let ml = Modulation::new(g, bound, &layout.ada, c, ones)?;
                    let xl = modulate(g, lv, ml.shift1, ml.scale1)?;
                    let pl = project(g, bound, &layout.q, &layout.k, &layout.v, xl)?;
                    let bres = ctx.joint(g, &[(Modality::Image, &pz2), (Modality::Layout, &pl)])?;
                    let dz = match delta {
                        DeltaProj::Full(lin) => lin.apply(g, bound, bres[0])?,
                        DeltaProj::LowRank(lo) => lo.apply(g, bound, bres[0])?,
                    };
                    z1 = g.add(z1, dz)?;
                    let l1 = attn_residual(g, bound, &layout.o, lv, bres[1], ml.gate1)?;
                    l = Some(mlp_residual(g, bound, layout, &ml, l1)?);
                }
                _ => {}
            }
            let p1 = attn_residual(g, bound, &bw.text.o, p, a[1], mp.gate1)?;
            p = mlp_residual(g, bound, &bw.text, &mp, p1)?;
            z = mlp_residual(g, bound, &bw.image, &mz, z1)?;
        }

        let fm = base.final_ada.apply(g, bound, c)?;
        let shift = g.slice_cols(fm, 0, d)?;
        let scale = g.slice_cols(fm, d, d)?;
        let scale = g.add(scale, ones)?;
        let h = modulate(g, z, shift, scale)?;
        Ok(ForwardOutput {
            eps: base.final_proj.apply(g, bound, h)?,
            layout_calls,
            attention: capture.unwrap_or_default(),
        })
    }

    /// Noise prediction as an image-shaped tensor on a throwaway
    /// inference graph.
    pub fn predict(&self, tokens: &Tensor, t: usize, layout: &Layout, layout_active: bool) -> Result<(Tensor, usize)> {
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g)?;
        let out = self.forward(
            &mut g,
            &bound,
            ForwardInput { tokens, t, layout },
            ForwardOptions {
                layout_active,
                capture: false,
            },
        )?;
        let (r, c) = g.shape(out.eps);
        Ok((Tensor::matrix(r, c, g.value(out.eps).to_vec())?, out.layout_calls))
    }
}
