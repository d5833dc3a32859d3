use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::diffusion::{ProbeValues, Schedule, TrainExample};
use crate::encoders::Layout;
use crate::error::Result;
use crate::mmdit::{AttentionMap, ForwardInput, ForwardOptions, Modality, Model};
use crate::numcore::{Graph, Tensor};
use crate::rng::{normal_vec, SeedStream};

/// Mean of the largest `⌈frac·n⌉` values (at least one).
pub fn top_fraction_mean(values: &[f64], frac: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let k = ((values.len() as f64 * frac).ceil() as usize).clamp(1, values.len());
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    Some(v[..k].iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadScore {
    pub sim_text: Option<f64>,
    pub sim_layout: Option<f64>,
}

/// Image→text and image→layout similarity per block and head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnSimilarity {
    pub heads: BTreeMap<(usize, usize), HeadScore>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl AttnSimilarity {
    /// Average over heads within each block, then over blocks.
    fn overall(&self, pick: impl Fn(&HeadScore) -> Option<f64>) -> Option<f64> {
        let mut blocks: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (&(b, _), s) in &self.heads {
            if let Some(v) = pick(s) {
                blocks.entry(b).or_default().push(v);
            }
        }
        mean(blocks.values().filter_map(|v| mean(v.iter().copied())))
    }

    pub fn sim_text(&self) -> Option<f64> {
        self.overall(|s| s.sim_text)
    }

    pub fn sim_layout(&self) -> Option<f64> {
        self.overall(|s| s.sim_layout)
    }

    pub fn values(&self) -> ProbeValues {
        ProbeValues {
            sim_text: self.sim_text(),
            sim_layout: self.sim_layout(),
        }
    }
}

/// Score captured attention maps: for each map, the image-query rows
/// against each modality's key columns.
pub fn attn_similarity(maps: &[AttentionMap]) -> AttnSimilarity {
    let mut acc: BTreeMap<(usize, usize, bool), Vec<f64>> = BTreeMap::new();
    for m in maps {
        for (modality, cols) in &m.keys {
            let is_text = match modality {
                Modality::Text => true,
                Modality::Layout => false,
                Modality::Image => continue,
            };
            if cols.is_empty() || m.query.is_empty() {
                continue;
            }
            let sub: Vec<f64> = m
                .query
                .clone()
                .flat_map(|i| cols.clone().map(move |j| (i, j)))
                .map(|(i, j)| m.probs[i * m.cols + j])
                .collect();
            if let Some(s) = top_fraction_mean(&sub, 0.01) {
                acc.entry((m.block, m.head, is_text)).or_default().push(s);
            }
        }
    }
    let mut out = AttnSimilarity::default();
    for ((b, h, is_text), v) in acc {
        let s = out.heads.entry((b, h)).or_default();
        let val = mean(v.into_iter());
        if is_text {
            s.sim_text = val;
        } else {
            s.sim_layout = val;
        }
    }
    out
}

/// Fixed probe batch so readings are comparable across steps, variants
/// and seeds.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    items: Vec<(Tensor, usize, Layout)>,
}

impl ProbeSet {
    pub fn new(examples: &[TrainExample], schedule: &Schedule, t: usize, seed: u64) -> Result<Self> {
        let stream = SeedStream::new(seed).substream("probe");
        let items = examples
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut rng = stream.index(i as u64).rng();
                let eps = normal_vec(&mut rng, ex.tokens.len());
                let zt = schedule.q_sample(ex.tokens.data(), t, &eps)?;
                let (r, c) = ex.tokens.as_matrix_dims();
                Ok((Tensor::matrix(r, c, zt)?, t, ex.layout.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    /// Per-head scores averaged over the probe batch.
    pub fn measure(&self, model: &Model) -> Result<AttnSimilarity> {
        let mut sums: BTreeMap<(usize, usize), [(f64, usize); 2]> = BTreeMap::new();
        for (tokens, t, layout) in &self.items {
            let mut g = Graph::inference();
            let bound = model.params.bind(&mut g)?;
            let out = model.forward(
                &mut g,
                &bound,
                ForwardInput {
                    tokens,
                    t: *t,
                    layout,
                },
                ForwardOptions {
                    layout_active: true,
                    capture: true,
                },
            )?;
            for (k, s) in attn_similarity(&out.attention).heads {
                let e = sums.entry(k).or_default();
                for (slot, v) in e.iter_mut().zip([s.sim_text, s.sim_layout]) {
                    if let Some(v) = v {
                        slot.0 += v;
                        slot.1 += 1;
                    }
                }
            }
        }
        let avg = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        Ok(AttnSimilarity {
            heads: sums
                .into_iter()
                .map(|(k, [t, l])| {
                    (
                        k,
                        HeadScore {
                            sim_text: avg(t),
                            sim_layout: avg(l),
                        },
                    )
                })
                .collect(),
        })
    }
}

/// One CSV row per (step, block, head).
pub fn write_similarity_csv(path: &Path, rows: &[(u64, AttnSimilarity)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,block,head,sim_text,sim_layout")?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    for (step, sim) in rows {
        for (&(b, h), s) in &sim.heads {
            writeln!(w, "{step},{b},{h},{},{}", cell(s.sim_text), cell(s.sim_layout))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(probs: Vec<f64>, rows: usize, cols: usize, keys: Vec<(Modality, std::ops::Range<usize>)>) -> AttentionMap {
        AttentionMap {
            block: 0,
            head: 0,
            rows,
            cols,
            query: 0..rows,
            keys,
            probs,
        }
    }

    #[test]
    fn top_one_percent_of_two_hundred_is_two() {
        let v: Vec<f64> = (0..200).map(f64::from).collect();
        assert_eq!(top_fraction_mean(&v, 0.01), Some(198.5));
        assert_eq!(top_fraction_mean(&[0.3], 0.01), Some(0.3));
        assert_eq!(top_fraction_mean(&[], 0.01), None);
    }

    #[test]
    fn uniform_attention_scores_one_over_k() {
        let (rows, k) = (4, 8);
        let m = map(
            vec![1.0 / k as f64; rows * k],
            rows,
            k,
            vec![(Modality::Image, 0..4), (Modality::Text, 4..6), (Modality::Layout, 6..8)],
        );
        let s = attn_similarity(&[m]);
        assert_eq!(s.sim_text(), Some(0.125));
        assert_eq!(s.sim_layout(), Some(0.125));
    }

    #[test]
    fn one_hot_layout_attention_scores_one_and_absent_text_is_omitted() {
        let mut probs = vec![0.0; 3 * 5];
        for r in 0..3 {
            probs[r * 5 + 4] = 1.0;
        }
        let m = map(probs, 3, 5, vec![(Modality::Image, 0..3), (Modality::Layout, 3..5)]);
        let s = attn_similarity(&[m]);
        assert_eq!(s.sim_layout(), Some(1.0));
        assert_eq!(s.sim_text(), None);
    }
}
