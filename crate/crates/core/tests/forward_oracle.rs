//! The model's tape forward against a plain dense re-implementation.

mod common;

use common::{init_deviation, lora_deviations, random_input, tape};
use mmlayout::encoders::{fourier_embed, grid_positions, sequence_positions, Layout, TextShape, PAD};
use mmlayout::mmdit::{
    DeltaProj, LayoutBlock, LoraTarget, Model, ModelConfig, StreamWeights, VariantTag,
};
use mmlayout::numcore::Tensor;
use mmlayout::params::{Linear, ParamGroup};
use mmlayout::rng::{normal, SeedStream};

#[derive(Clone, Debug)]
struct M {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl M {
    fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(d.len(), r * c);
        Self { r, c, d }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    fn mm(&self, b: &M) -> M {
        assert_eq!(self.c, b.r);
        let mut out = vec![0.0; self.r * b.c];
        for i in 0..self.r {
            for j in 0..b.c {
                out[i * b.c + j] = (0..self.c).map(|k| self.at(i, k) * b.at(k, j)).sum();
            }
        }
        M::new(self.r, b.c, out)
    }

    fn zip(&self, b: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!((self.r, self.c), (b.r, b.c));
        M::new(self.r, self.c, self.d.iter().zip(&b.d).map(|(x, y)| f(*x, *y)).collect())
    }

    fn add(&self, b: &M) -> M {
        self.zip(b, |x, y| x + y)
    }

    /// Broadcast a `[1, c]` row with `f`.
    fn row(&self, b: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!((b.r, b.c), (1, self.c));
        M::new(self.r, self.c, (0..self.r * self.c).map(|i| f(self.d[i], b.d[i % self.c])).collect())
    }

    fn cols(&self, start: usize, len: usize) -> M {
        M::new(
            self.r,
            len,
            (0..self.r).flat_map(|i| (start..start + len).map(move |j| (i, j))).map(|(i, j)| self.at(i, j)).collect(),
        )
    }

    fn rows(&self, start: usize, len: usize) -> M {
        M::new(len, self.c, self.d[start * self.c..(start + len) * self.c].to_vec())
    }

    fn stack(parts: &[&M]) -> M {
        let c = parts[0].c;
        M::new(parts.iter().map(|p| p.r).sum(), c, parts.iter().flat_map(|p| p.d.clone()).collect())
    }

    fn hcat(parts: &[M]) -> M {
        let r = parts[0].r;
        let c = parts.iter().map(|p| p.c).sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                d.extend_from_slice(&p.d[i * p.c..(i + 1) * p.c]);
            }
        }
        M::new(r, c, d)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M::new(self.r, self.c, self.d.iter().map(|v| f(*v)).collect())
    }
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

fn layer_norm(x: &M) -> M {
    let mut out = x.clone();
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        for j in 0..x.c {
            out.d[i * x.c + j] = (row[j] - mean) / (var + 1e-6).sqrt();
        }
    }
    out
}

struct Oracle<'m> {
    m: &'m Model,
}

impl Oracle<'_> {
    fn tensor(&self, id: mmlayout::params::ParamId) -> M {
        let t = self.m.params.get(id);
        let (r, c) = t.as_matrix_dims();
        M::new(r, c, t.data().to_vec())
    }

    fn linear(&self, l: &Linear, x: &M) -> M {
        let mut y = x.mm(&self.tensor(l.w));
        if let Some(lo) = &l.lora {
            y = y.add(&x.mm(&self.tensor(lo.a)).mm(&self.tensor(lo.b)));
        }
        match l.b {
            Some(b) => y.row(&self.tensor(b), |a, b| a + b),
            None => y,
        }
    }

    /// Six `[1, d]` modulation rows; scales already offset by one.
    fn modulation(&self, ada: &Linear, c: &M) -> Vec<M> {
        let m = self.linear(ada, c);
        let d = m.c / 6;
        (0..6)
            .map(|i| {
                let part = m.cols(i * d, d);
                if i == 1 || i == 4 {
                    part.map(|v| v + 1.0)
                } else {
                    part
                }
            })
            .collect()
    }

    fn modulate(x: &M, shift: &M, scale: &M) -> M {
        layer_norm(x).row(scale, |a, b| a * b).row(shift, |a, b| a + b)
    }

    fn attention(&self, q: &M, k: &M, v: &M) -> M {
        let heads = self.m.config.heads;
        let dh = q.c / heads;
        let mut outs = Vec::new();
        for h in 0..heads {
            let (qh, kh, vh) = (q.cols(h * dh, dh), k.cols(h * dh, dh), v.cols(h * dh, dh));
            let mut p = vec![0.0; q.r * k.r];
            for i in 0..q.r {
                let s: Vec<f64> = (0..k.r)
                    .map(|j| (0..dh).map(|t| qh.at(i, t) * kh.at(j, t)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for j in 0..k.r {
                    p[i * k.r + j] = (s[j] - mx).exp() / z;
                }
            }
            outs.push(M::new(q.r, k.r, p).mm(&vh));
        }
        M::hcat(&outs)
    }

    fn mlp(&self, s: &StreamWeights, md: &[M], x: &M) -> M {
        let h = Self::modulate(x, &md[3], &md[4]);
        let h = self.linear(&s.mlp1, &h).map(gelu);
        let h = self.linear(&s.mlp2, &h).row(&md[5], |a, b| a * b);
        x.add(&h)
    }

    fn forward(&self, tokens: &Tensor, t: usize, layout: &Layout, active: bool) -> M {
        let m = self.m;
        let cfg = &m.config;
        let d = cfg.dim;
        let tz = cfg.image_tokens();
        let x = M::new(tz, cfg.patch_dim(), tokens.data().to_vec());
        let mut z = self
            .linear(&m.base.patch_embed, &x)
            .add(&M::new(tz, d, grid_positions(cfg.grid(), cfg.grid(), d)));
        let table = self.tensor(m.base.caption_table);
        let cl = cfg.text.caption_len;
        let mut p = M::new(cl, d, layout.caption.iter().flat_map(|&i| table.rows(i, 1).d).collect())
            .add(&M::new(cl, d, sequence_positions(cl, d)));
        let half = d / 2;
        let mut tf = vec![0.0; d];
        for i in 0..half {
            let w = (t as f64) / 10_000f64.powf(i as f64 / half as f64);
            tf[i] = w.sin();
            tf[half + i] = w.cos();
        }
        let c = self.linear(&m.base.t_fc1, &M::new(1, d, tf)).map(gelu);
        let c = self.linear(&m.base.t_fc2, &c).map(gelu);

        let on = active && m.variant != VariantTag::Base && !layout.entities.is_empty();
        let mut l = if on {
            let enc = &m.layout.as_ref().unwrap().encoder;
            let rows: Vec<f64> = layout
                .entities
                .iter()
                .flat_map(|e| {
                    let words: Vec<usize> = e.caption.iter().copied().filter(|&i| i != PAD).collect();
                    let mut pooled = vec![0.0; d];
                    for &w in &words {
                        for j in 0..d {
                            pooled[j] += table.at(w, j) / words.len() as f64;
                        }
                    }
                    pooled.extend(fourier_embed(&e.bbox, enc.freqs));
                    pooled
                })
                .collect();
            let x = M::new(layout.entities.len(), d + 8 * enc.freqs, rows);
            let h = self.linear(&enc.fc1, &x).map(gelu);
            Some(self.linear(&enc.fc2, &h))
        } else {
            None
        };

        for (b, bw) in m.base.blocks.iter().enumerate() {
            let lb = if l.is_some() { Some(&m.layout.as_ref().unwrap().blocks[b]) } else { None };
            let mz = self.modulation(&bw.image.ada, &c);
            let mp = self.modulation(&bw.text.ada, &c);
            let xz = Self::modulate(&z, &mz[0], &mz[1]);
            let xp = Self::modulate(&p, &mp[0], &mp[1]);
            let (qz, kz, vz) = (
                self.linear(&bw.image.q, &xz),
                self.linear(&bw.image.k, &xz),
                self.linear(&bw.image.v, &xz),
            );
            let (qp, kp, vp) = (
                self.linear(&bw.text.q, &xp),
                self.linear(&bw.text.k, &xp),
                self.linear(&bw.text.v, &xp),
            );
            if let Some(LayoutBlock::M3 { layout: ls }) = lb {
                let lv = l.clone().unwrap();
                let ml = self.modulation(&ls.ada, &c);
                let xl = Self::modulate(&lv, &ml[0], &ml[1]);
                let (ql, kl, vl) = (self.linear(&ls.q, &xl), self.linear(&ls.k, &xl), self.linear(&ls.v, &xl));
                let a = self.attention(
                    &M::stack(&[&qz, &qp, &ql]),
                    &M::stack(&[&kz, &kp, &kl]),
                    &M::stack(&[&vz, &vp, &vl]),
                );
                let (az, ap, al) = (a.rows(0, z.r), a.rows(z.r, p.r), a.rows(z.r + p.r, lv.r));
                let z1 = z.add(&self.linear(&bw.image.o, &az).row(&mz[2], |a, b| a * b));
                let p1 = p.add(&self.linear(&bw.text.o, &ap).row(&mp[2], |a, b| a * b));
                let l1 = lv.add(&self.linear(&ls.o, &al).row(&ml[2], |a, b| a * b));
                z = self.mlp(&bw.image, &mz, &z1);
                p = self.mlp(&bw.text, &mp, &p1);
                l = Some(self.mlp(ls, &ml, &l1));
                continue;
            }
            let a = self.attention(&M::stack(&[&qz, &qp]), &M::stack(&[&kz, &kp]), &M::stack(&[&vz, &vp]));
            let (az, ap) = (a.rows(0, z.r), a.rows(z.r, p.r));
            let mut z1 = z.add(&self.linear(&bw.image.o, &az).row(&mz[2], |a, b| a * b));
            match lb {
                Some(LayoutBlock::Adapter { k, v, out }) => {
                    let nl = layer_norm(l.as_ref().unwrap());
                    let cross = self.attention(&qz, &self.linear(k, &nl), &self.linear(v, &nl));
                    z1 = z1.add(&self.linear(out, &cross));
                }
                Some(LayoutBlock::Siam {
                    q,
                    k,
                    v,
                    layout: ls,
                    delta,
                }) => {
                    let lv = l.clone().unwrap();
                    let (q2, k2, v2) = (self.linear(q, &xz), self.linear(k, &xz), self.linear(v, &xz));
                    let ml = self.modulation(&ls.ada, &c);
                    let xl = Self::modulate(&lv, &ml[0], &ml[1]);
                    let (ql, kl, vl) = (self.linear(&ls.q, &xl), self.linear(&ls.k, &xl), self.linear(&ls.v, &xl));
                    let bo = self.attention(&M::stack(&[&q2, &ql]), &M::stack(&[&k2, &kl]), &M::stack(&[&v2, &vl]));
                    let (bz, bl) = (bo.rows(0, z.r), bo.rows(z.r, lv.r));
                    let dz = match delta {
                        DeltaProj::Full(lin) => self.linear(lin, &bz),
                        DeltaProj::LowRank(lo) => bz.mm(&self.tensor(lo.a)).mm(&self.tensor(lo.b)),
                    };
                    z1 = z1.add(&dz);
                    let l1 = lv.add(&self.linear(&ls.o, &bl).row(&ml[2], |a, b| a * b));
                    l = Some(self.mlp(ls, &ml, &l1));
                }
                _ => {}
            }
            let p1 = p.add(&self.linear(&bw.text.o, &ap).row(&mp[2], |a, b| a * b));
            p = self.mlp(&bw.text, &mp, &p1);
            z = self.mlp(&bw.image, &mz, &z1);
        }
        let fm = self.linear(&m.base.final_ada, &c);
        let (shift, scale) = (fm.cols(0, d), fm.cols(d, d).map(|v| v + 1.0));
        let h = Self::modulate(&z, &shift, &scale);
        self.linear(&m.base.final_proj, &h)
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        text: TextShape {
            caption_len: 2,
            region_len: 2,
            max_entities: 3,
        },
        fourier_freqs: 2,
        ..ModelConfig::default()
    }
}

/// Every tensor nudged away from its initial value so zero-initialised
/// paths carry signal.
fn perturb(model: &mut Model, seed: u64) {
    let mut rng = SeedStream::new(seed).substream("perturb").rng();
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).data_mut() {
            *v += 0.3 * normal(&mut rng);
        }
    }
}

fn all_variants() -> [VariantTag; 5] {
    [
        VariantTag::Base,
        VariantTag::Adapter,
        VariantTag::M3,
        VariantTag::Siam,
        VariantTag::SiamLora { rank: 2 },
    ]
}

#[test]
fn tape_forward_matches_dense_oracle() {
    for cfg in [small_config(), ModelConfig::tiny()] {
        let base = Model::new_base(cfg.clone(), 11).unwrap();
        for (vi, variant) in all_variants().into_iter().enumerate() {
            let mut m = Model::with_variant(&base, variant, 12).unwrap();
            perturb(&mut m, 100 + vi as u64);
            for (case, n) in [0, 1, 3].into_iter().enumerate() {
                let (tokens, layout) = random_input(&cfg, n, (vi * 10 + case) as u64);
                for active in [true, false] {
                    let got = tape(&m, &tokens, 417, &layout, active);
                    let want = Oracle { m: &m }.forward(&tokens, 417, &layout, active);
                    let err = got.iter().zip(&want.d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    assert!(err < 1e-10, "{variant} n={n} active={active}: {err:e}");
                }
            }
        }
    }
}

#[test]
fn wrapped_siam_matches_dense_oracle() {
    let cfg = small_config();
    let base = Model::new_base(cfg.clone(), 3).unwrap();
    let mut m = Model::with_variant(&base, VariantTag::Siam, 4).unwrap();
    m.lora_wrap(2, &LoraTarget::ALL).unwrap();
    perturb(&mut m, 5);
    let (tokens, layout) = random_input(&cfg, 2, 9);
    let got = tape(&m, &tokens, 10, &layout, true);
    let want = Oracle { m: &m }.forward(&tokens, 10, &layout, true);
    let err = got.iter().zip(&want.d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err:e}");
}

#[test]
fn lora_zero_b_is_identity_and_merge_agrees() {
    let (zero_b, merged) = lora_deviations();
    assert!(zero_b <= 1e-12, "{zero_b:e}");
    assert!(merged <= 1e-6, "{merged:e}");
}

#[test]
fn gated_variants_start_as_the_base() {
    for v in [VariantTag::Adapter, VariantTag::Siam, VariantTag::SiamLora { rank: 2 }] {
        let e = init_deviation(v, 100);
        assert!(e <= 1e-12, "{v}: {e:e}");
    }
}

#[test]
fn joint_attention_variant_departs_from_the_base_at_init() {
    // Layout tokens take softmax mass from image and text keys as soon as
    // they join the joint attention, whatever their projections hold.
    assert!(init_deviation(VariantTag::M3, 10) > 1e-6);
}

#[test]
fn only_layout_additions_train() {
    let base = Model::new_base(ModelConfig::tiny(), 1).unwrap();
    for variant in all_variants().into_iter().skip(1) {
        let m = Model::with_variant(&base, variant, 2).unwrap();
        for id in m.params.ids() {
            let e = m.params.entry(id);
            if e.group == ParamGroup::Base {
                assert!(!e.tensor.requires_grad(), "{variant}: {} trains", e.name);
            }
        }
        assert!(!m.trainable_ids().is_empty());
    }
}
