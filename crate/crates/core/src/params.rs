//! Named parameter storage and the linear layers built on it.
//!
//! A parameter's trainability is its tensor's `requires_grad` flag. Linear
//! layers refer to parameters by id, so two layers may share a tensor.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// θ (pretrained backbone) or θ′ (layout additions).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Base,
    Layout,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, group: ParamGroup, trainable: bool) -> ParamId {
        tensor.set_requires_grad(trainable);
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].tensor.set_requires_grad(flag);
    }

    /// Total scalar count of parameters in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Put every parameter on the tape, borrowing its storage. The returned
    /// vector is indexed by [`ParamId`].
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .map(|e| {
                let (r, c) = e.tensor.as_matrix_dims();
                g.borrowed(r, c, e.tensor.data(), e.tensor.requires_grad())
            })
            .collect()
    }
}

/// Low-rank factors `A[d_in, r]` and `B[r, d_out]`; the layer's effective
/// weight becomes `W + A·B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl Lora {
    /// `A` small random, `B` zero.
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(invalid(format!(
                "LoRA rank {rank} must lie in 1..={} for a {d_in}x{d_out} layer",
                d_in.min(d_out)
            )));
        }
        let a = store.add(
            format!("{name}.lora_a"),
            Tensor::randn(&[d_in, rank], 1.0 / (d_in as f64).sqrt(), rng),
            ParamGroup::Layout,
            true,
        );
        let b = store.add(format!("{name}.lora_b"), Tensor::zeros(&[rank, d_out]), ParamGroup::Layout, true);
        Ok(Self { a, b, rank })
    }

    pub fn apply(&self, g: &mut Graph<'_>, bound: &[Var], x: Var) -> Result<Var> {
        let xa = g.matmul(x, bound[self.a.0])?;
        g.matmul(xa, bound[self.b.0])
    }
}

/// `y = x·W + b (+ x·A·B)` on row-token matrices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<Lora>,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(d_in)` scaled by `gain`; zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Self {
        let std = gain / (d_in as f64).sqrt();
        let w = if gain == 0.0 {
            Tensor::zeros(&[d_in, d_out])
        } else {
            Tensor::randn(&[d_in, d_out], std, rng)
        };
        let trainable = true;
        let w = store.add(format!("{name}.w"), w, group, trainable);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), group, trainable);
        Self {
            w,
            b: Some(b),
            d_in,
            d_out,
            lora: None,
        }
    }

    /// Trainable copy of another layer's current weights.
    pub fn copy_of(store: &mut ParamStore, name: &str, src: &Linear, group: ParamGroup) -> Self {
        let w = store.get(src.w).clone();
        let w = store.add(format!("{name}.w"), w, group, true);
        let b = src.b.map(|b| {
            let t = store.get(b).clone();
            store.add(format!("{name}.b"), t, group, true)
        });
        Self {
            w,
            b,
            d_in: src.d_in,
            d_out: src.d_out,
            lora: None,
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, bound: &[Var], x: Var) -> Result<Var> {
        let mut y = g.matmul(x, bound[self.w.0])?;
        if let Some(lora) = &self.lora {
            let delta = lora.apply(g, bound, x)?;
            y = g.add(y, delta)?;
        }
        match self.b {
            Some(b) => g.add_row(y, bound[b.0]),
            None => Ok(y),
        }
    }

    /// Parameters owned by this layer (weight, bias, low-rank factors).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        ids.extend(self.b);
        if let Some(l) = &self.lora {
            ids.extend([l.a, l.b]);
        }
        ids
    }

    /// Multiply-accumulates for `tokens` rows.
    pub fn macs(&self, tokens: usize) -> u64 {
        let mut m = tokens * self.d_in * self.d_out;
        if let Some(l) = &self.lora {
            m += tokens * l.rank * (self.d_in + self.d_out);
        }
        m as u64
    }

    /// Freeze the weight and attach trainable low-rank factors.
    pub fn wrap_lora(&mut self, store: &mut ParamStore, name: &str, rank: usize, rng: &mut Rng) -> Result<()> {
        self.lora = Some(Lora::init(store, name, self.d_in, self.d_out, rank, rng)?);
        store.set_trainable(self.w, false);
        if let Some(b) = self.b {
            store.set_trainable(b, false);
        }
        Ok(())
    }

    /// Effective weight `W + A·B` as a plain matrix.
    pub fn merged_weight(&self, store: &ParamStore) -> Vec<f64> {
        let mut w = store.get(self.w).data().to_vec();
        if let Some(l) = &self.lora {
            let (a, b) = (store.get(l.a).data(), store.get(l.b).data());
            for i in 0..self.d_in {
                for k in 0..l.rank {
                    let s = a[i * l.rank + k];
                    for j in 0..self.d_out {
                        w[i * self.d_out + j] += s * b[k * self.d_out + j];
                    }
                }
            }
        }
        w
    }
}
