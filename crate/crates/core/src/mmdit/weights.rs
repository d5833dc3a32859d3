use serde::{Deserialize, Serialize};

use crate::encoders::LayoutEncoder;
use crate::error::Result;
use crate::numcore::Tensor;
use crate::params::{Linear, Lora, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;

use super::config::ModelConfig;

/// Per-modality transformer weights: AdaLN projection, attention
/// projections and the feed-forward pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamWeights {
    pub ada: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl StreamWeights {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup, rng: &mut Rng) -> Self {
        Self {
            // AdaLN-zero: gates start closed.
            ada: Linear::init(store, &format!("{name}.ada"), d, 6 * d, 0.0, group, rng),
            q: Linear::init(store, &format!("{name}.q"), d, d, 1.0, group, rng),
            k: Linear::init(store, &format!("{name}.k"), d, d, 1.0, group, rng),
            v: Linear::init(store, &format!("{name}.v"), d, d, 1.0, group, rng),
            o: Linear::init(store, &format!("{name}.o"), d, d, 1.0, group, rng),
            mlp1: Linear::init(store, &format!("{name}.mlp1"), d, 4 * d, 1.0, group, rng),
            mlp2: Linear::init(store, &format!("{name}.mlp2"), 4 * d, d, 1.0, group, rng),
        }
    }

    /// Trainable copies of every tensor of `src`.
    pub fn copy_of(store: &mut ParamStore, name: &str, src: &StreamWeights, group: ParamGroup) -> Self {
        Self {
            ada: Linear::copy_of(store, &format!("{name}.ada"), &src.ada, group),
            q: Linear::copy_of(store, &format!("{name}.q"), &src.q, group),
            k: Linear::copy_of(store, &format!("{name}.k"), &src.k, group),
            v: Linear::copy_of(store, &format!("{name}.v"), &src.v, group),
            o: Linear::copy_of(store, &format!("{name}.o"), &src.o, group),
            mlp1: Linear::copy_of(store, &format!("{name}.mlp1"), &src.mlp1, group),
            mlp2: Linear::copy_of(store, &format!("{name}.mlp2"), &src.mlp2, group),
        }
    }

    pub fn linears(&self) -> [&Linear; 7] {
        [&self.ada, &self.q, &self.k, &self.v, &self.o, &self.mlp1, &self.mlp2]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 7] {
        [
            &mut self.ada,
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.mlp1,
            &mut self.mlp2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseBlock {
    pub image: StreamWeights,
    pub text: StreamWeights,
}

/// The pretrained image+text backbone (θ).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseWeights {
    pub patch_embed: Linear,
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub caption_table: ParamId,
    pub blocks: Vec<BaseBlock>,
    pub final_ada: Linear,
    pub final_proj: Linear,
}

impl BaseWeights {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, g) = (cfg.dim, ParamGroup::Base);
        let patch_embed = Linear::init(store, "patch_embed", cfg.patch_dim(), d, 1.0, g, rng);
        let t_fc1 = Linear::init(store, "t_embed.fc1", d, d, 1.0, g, rng);
        let t_fc2 = Linear::init(store, "t_embed.fc2", d, d, 1.0, g, rng);
        let caption_table = store.add(
            "caption_table",
            Tensor::randn(&[cfg.vocab_size, d], 1.0, rng),
            g,
            true,
        );
        let blocks = (0..cfg.depth)
            .map(|b| BaseBlock {
                image: StreamWeights::init(store, &format!("blocks.{b}.image"), d, g, rng),
                text: StreamWeights::init(store, &format!("blocks.{b}.text"), d, g, rng),
            })
            .collect();
        let final_ada = Linear::init(store, "final.ada", d, 2 * d, 0.0, g, rng);
        let final_proj = Linear::init(store, "final.proj", d, cfg.patch_dim(), 0.0, g, rng);
        Self {
            patch_embed,
            t_fc1,
            t_fc2,
            caption_table,
            blocks,
            final_ada,
            final_proj,
        }
    }
}

/// Image-side output of the image-layout branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaProj {
    Full(Linear),
    /// `x·A·B` with no dense base weight.
    LowRank(Lora),
}

impl DeltaProj {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Self::Full(l) => l.param_ids(),
            Self::LowRank(l) => vec![l.a, l.b],
        }
    }
}

/// Per-block layout additions (θ′), one shape per variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutBlock {
    /// Cross-attention from image queries to layout keys and values.
    Adapter { k: Linear, v: Linear, out: Linear },
    /// Layout as a third stream inside one joint attention.
    M3 { layout: StreamWeights },
    /// Parallel image-layout attention branch with its own image
    /// projections; its image output enters through `delta`.
    Siam {
        q: Linear,
        k: Linear,
        v: Linear,
        layout: StreamWeights,
        delta: DeltaProj,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutWeights {
    pub encoder: LayoutEncoder,
    pub blocks: Vec<LayoutBlock>,
}

/// Linear layers of the image-layout branch that a LoRA wrap may target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    /// Query/key/value projections of both streams in the branch.
    Linear1,
    /// Output projections (layout stream and the image-side delta).
    Linear2,
    /// First feed-forward layer of the layout stream.
    Mlp1,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 3] = [Self::Linear1, Self::Linear2, Self::Mlp1];
}

pub(crate) fn wrap_siam_block(
    block: &mut LayoutBlock,
    store: &mut ParamStore,
    name: &str,
    rank: usize,
    targets: &[LoraTarget],
    rng: &mut Rng,
) -> Result<()> {
    let LayoutBlock::Siam {
        q,
        k,
        v,
        layout,
        delta,
    } = block
    else {
        return Err(crate::error::invalid("LoRA wrapping applies to the siamese branch only"));
    };
    if targets.contains(&LoraTarget::Linear1) {
        for (n, lin) in [("q", q), ("k", k), ("v", v)] {
            lin.wrap_lora(store, &format!("{name}.{n}"), rank, rng)?;
        }
        for (n, lin) in [("q", &mut layout.q), ("k", &mut layout.k), ("v", &mut layout.v)] {
            lin.wrap_lora(store, &format!("{name}.layout.{n}"), rank, rng)?;
        }
    }
    if targets.contains(&LoraTarget::Linear2) {
        layout.o.wrap_lora(store, &format!("{name}.layout.o"), rank, rng)?;
        match delta {
            DeltaProj::Full(lin) => lin.wrap_lora(store, &format!("{name}.delta"), rank, rng)?,
            DeltaProj::LowRank(_) => {}
        }
    }
    if targets.contains(&LoraTarget::Mlp1) {
        layout.mlp1.wrap_lora(store, &format!("{name}.layout.mlp1"), rank, rng)?;
    }
    Ok(())
}
