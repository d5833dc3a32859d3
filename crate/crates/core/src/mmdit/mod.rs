//! MM-DiT backbone with image and caption streams, and the layout variants
//! that extend it.

mod checkpoint;
mod config;
mod forward;
mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use config::{ModelConfig, VariantTag};
pub use forward::{AttentionMap, ForwardInput, ForwardOptions, ForwardOutput, Modality};
pub use weights::{
    BaseBlock, BaseWeights, DeltaProj, LayoutBlock, LayoutWeights, LoraTarget, StreamWeights,
};

use serde::{Deserialize, Serialize};

use crate::encoders::LayoutEncoder;
use crate::error::{invalid, Result};
use crate::numcore::Tensor;
use crate::params::{Linear, Lora, ParamGroup, ParamId, ParamStore};
use crate::rng::SeedStream;

/// Post-hoc LoRA wrap applied to a siamese model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub targets: Vec<LoraTarget>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: VariantTag,
    /// Seed the layout additions were initialised from.
    pub seed: u64,
    pub params: ParamStore,
    pub base: BaseWeights,
    pub layout: Option<LayoutWeights>,
    pub lora: Option<LoraSpec>,
}

impl Model {
    /// Freshly initialised image+caption backbone.
    pub fn new_base(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = SeedStream::new(seed).substream("base-init").rng();
        let base = BaseWeights::init(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            variant: VariantTag::Base,
            seed,
            params,
            base,
            layout: None,
            lora: None,
        })
    }

    /// Copy of a base model with the layout additions of `variant`. Every
    /// backbone tensor is frozen; only the additions train.
    pub fn with_variant(base: &Model, variant: VariantTag, seed: u64) -> Result<Self> {
        if base.variant != VariantTag::Base {
            return Err(invalid(format!("expected a base model, got {}", base.variant)));
        }
        let mut m = base.clone();
        m.variant = variant;
        m.seed = seed;
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.set_trainable(id, false);
        }
        if variant == VariantTag::Base {
            return Ok(m);
        }
        let cfg = m.config.clone();
        let d = cfg.dim;
        let mut rng = SeedStream::new(seed).substream("layout-init").rng();
        let store = &mut m.params;
        let g = ParamGroup::Layout;
        let encoder = LayoutEncoder {
            fc1: Linear::init(store, "layout.encoder.fc1", d + 8 * cfg.fourier_freqs, d, 1.0, g, &mut rng),
            fc2: Linear::init(store, "layout.encoder.fc2", d, d, 1.0, g, &mut rng),
            freqs: cfg.fourier_freqs,
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for (b, bw) in m.base.blocks.iter().enumerate() {
            let name = format!("layout.blocks.{b}");
            let block = match variant {
                VariantTag::Base => unreachable!(),
                VariantTag::Adapter => LayoutBlock::Adapter {
                    k: Linear::copy_of(store, &format!("{name}.k"), &bw.text.k, g),
                    v: Linear::copy_of(store, &format!("{name}.v"), &bw.text.v, g),
                    out: Linear::init(store, &format!("{name}.out"), d, d, 0.0, g, &mut rng),
                },
                VariantTag::M3 => {
                    let n = format!("{name}.layout");
                    LayoutBlock::M3 {
                        layout: StreamWeights {
                            ada: Linear::copy_of(store, &format!("{n}.ada"), &bw.text.ada, g),
                            q: Linear::init(store, &format!("{n}.q"), d, d, 0.1, g, &mut rng),
                            k: Linear::init(store, &format!("{n}.k"), d, d, 0.1, g, &mut rng),
                            v: Linear::init(store, &format!("{n}.v"), d, d, 0.0, g, &mut rng),
                            o: Linear::init(store, &format!("{n}.o"), d, d, 0.0, g, &mut rng),
                            mlp1: Linear::init(store, &format!("{n}.mlp1"), d, 4 * d, 1.0, g, &mut rng),
                            mlp2: Linear::init(store, &format!("{n}.mlp2"), 4 * d, d, 0.0, g, &mut rng),
                        },
                    }
                }
                VariantTag::Siam => LayoutBlock::Siam {
                    q: Linear::copy_of(store, &format!("{name}.q"), &bw.image.q, g),
                    k: Linear::copy_of(store, &format!("{name}.k"), &bw.image.k, g),
                    v: Linear::copy_of(store, &format!("{name}.v"), &bw.image.v, g),
                    layout: StreamWeights::copy_of(store, &format!("{name}.layout"), &bw.text, g),
                    delta: DeltaProj::Full(Linear::init(store, &format!("{name}.delta"), d, d, 0.0, g, &mut rng)),
                },
                VariantTag::SiamLora { rank } => {
                    // Branch B reuses the frozen backbone projections; only the
                    // low-rank factors and the delta train.
                    let mut block = LayoutBlock::Siam {
                        q: bw.image.q.clone(),
                        k: bw.image.k.clone(),
                        v: bw.image.v.clone(),
                        layout: bw.text.clone(),
                        delta: DeltaProj::LowRank(Lora::init(store, &format!("{name}.delta"), d, d, rank, &mut rng)?),
                    };
                    weights::wrap_siam_block(&mut block, store, &name, rank, &LoraTarget::ALL, &mut rng)?;
                    block
                }
            };
            blocks.push(block);
        }
        m.layout = Some(LayoutWeights { encoder, blocks });
        Ok(m)
    }

    /// Attach LoRA factors to the chosen branch layers of a siamese model,
    /// freezing the wrapped weights.
    pub fn lora_wrap(&mut self, rank: usize, targets: &[LoraTarget]) -> Result<()> {
        if self.variant != VariantTag::Siam || self.lora.is_some() {
            return Err(invalid("LoRA wrapping needs an unwrapped siamese model"));
        }
        let mut rng = SeedStream::new(self.seed).substream("lora-wrap").rng();
        let layout = self.layout.as_mut().expect("siamese model has layout weights");
        for (b, block) in layout.blocks.iter_mut().enumerate() {
            weights::wrap_siam_block(block, &mut self.params, &format!("layout.blocks.{b}"), rank, targets, &mut rng)?;
        }
        self.lora = Some(LoraSpec {
            rank,
            targets: targets.to_vec(),
        });
        Ok(())
    }

    /// Equivalent model with every low-rank factor folded into a dense
    /// weight (`W + A·B`).
    pub fn merge_lora(&self) -> Result<Model> {
        let mut m = self.clone();
        let Some(layout) = m.layout.as_mut() else {
            return Ok(m);
        };
        let store = &mut m.params;
        for block in &mut layout.blocks {
            if let LayoutBlock::Siam {
                q,
                k,
                v,
                layout,
                delta,
            } = block
            {
                for lin in [q, k, v].into_iter().chain(layout.linears_mut()) {
                    merge_linear(store, lin)?;
                }
                if let DeltaProj::LowRank(lo) = *delta {
                    let (d_in, d_out) = (store.get(lo.a).shape()[0], store.get(lo.b).shape()[1]);
                    let mut lin = Linear {
                        w: lo.a,
                        b: None,
                        d_in,
                        d_out,
                        lora: None,
                    };
                    let w = dense_product(store, lo);
                    lin.w = store.add(
                        format!("{}.merged", store.entry(lo.a).name),
                        Tensor::matrix(d_in, d_out, w)?,
                        ParamGroup::Layout,
                        false,
                    );
                    *delta = DeltaProj::Full(lin);
                } else if let DeltaProj::Full(lin) = delta {
                    merge_linear(store, lin)?;
                }
            }
        }
        m.lora = None;
        Ok(m)
    }

    /// Ids of every parameter that currently trains.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.get(id).requires_grad()).collect()
    }

    pub fn base_param_count(&self) -> usize {
        self.params.count(ParamGroup::Base)
    }

    pub fn extra_param_count(&self) -> usize {
        self.params.count(ParamGroup::Layout)
    }
}

fn dense_product(store: &ParamStore, lo: Lora) -> Vec<f64> {
    let (a, b) = (store.get(lo.a), store.get(lo.b));
    let (d_in, d_out) = (a.shape()[0], b.shape()[1]);
    let mut w = vec![0.0; d_in * d_out];
    for i in 0..d_in {
        for r in 0..lo.rank {
            let s = a.data()[i * lo.rank + r];
            for j in 0..d_out {
                w[i * d_out + j] += s * b.data()[r * d_out + j];
            }
        }
    }
    w
}

fn merge_linear(store: &mut ParamStore, lin: &mut Linear) -> Result<()> {
    if lin.lora.is_none() {
        return Ok(());
    }
    let w = lin.merged_weight(store);
    let name = format!("{}.merged", store.entry(lin.w).name);
    lin.w = store.add(name, Tensor::matrix(lin.d_in, lin.d_out, w)?, ParamGroup::Layout, false);
    lin.lora = None;
    Ok(())
}
