//! Synthetic shape scenes with exact annotations, and the pixel-rule
//! oracle that scores generated images against their layouts.

mod benchmark;
mod dataset;
mod oracle;
mod raster;

pub use benchmark::{benchmark, BenchRow, BenchTable};
pub use dataset::{read_dataset, read_ppm, write_dataset, write_ppm, DatasetItem, Manifest};
pub use oracle::{components, foreground, oracle_eval, EntityVerdict, OracleConfig, OracleReport};
pub use raster::{covers, template, Color, PixelBox, Shape};

use serde::{Deserialize, Serialize};

use crate::encoders::{BBox, EntityDoc, Layout, LayoutDoc, TextShape, Vocabulary};
use crate::error::{invalid, Result};
use crate::mmdit::ModelConfig;
use crate::numcore::Tensor;
use crate::rng::{uniform_int, SeedStream};

/// Generator settings. Boxes are whole patch cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Box side range in cells.
    pub min_cells: usize,
    pub max_cells: usize,
    /// Empty cells kept between boxes.
    pub gap_cells: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            min_entities: 1,
            max_entities: 4,
            min_cells: 2,
            max_cells: 4,
            gap_cells: 1,
        }
    }
}

impl SceneConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Default scene statistics on the model's image size and patch grid.
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            image_size: model.image_size,
            patch: model.patch,
            ..Self::default()
        }
    }

    /// Same geometry expressed for a model with a different patch size.
    pub fn for_patch(patch: usize, image_size: usize) -> Self {
        let scale = 4 / patch.clamp(1, 4);
        Self {
            image_size,
            patch,
            min_cells: 2 * scale,
            max_cells: 4 * scale,
            gap_cells: scale,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub shape: Shape,
    pub color: Color,
    pub bbox: BBox,
}

impl SceneEntity {
    pub fn caption(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

/// Black background plus 1..4 entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub entities: Vec<SceneEntity>,
}

impl SceneSpec {
    pub const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

    /// `a <color> <shape> and a <color> <shape> ...`
    pub fn caption(&self) -> String {
        self.entities
            .iter()
            .map(|e| format!("a {}", e.caption()))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    pub fn to_doc(&self) -> LayoutDoc {
        LayoutDoc {
            caption: self.caption(),
            entities: self
                .entities
                .iter()
                .map(|e| EntityDoc {
                    bbox: e.bbox.to_array(),
                    caption: e.caption(),
                })
                .collect(),
        }
    }

    pub fn to_layout(&self, vocab: &Vocabulary, shape: &TextShape) -> Result<Layout> {
        Layout::encode(&self.to_doc(), vocab, shape)
    }

    /// Recover the spec from a document written by [`SceneSpec::to_doc`].
    pub fn from_doc(doc: &LayoutDoc) -> Result<Self> {
        let entities = doc
            .entities
            .iter()
            .map(|e| {
                let words: Vec<&str> = e.caption.split_whitespace().collect();
                let [c, s] = words[..] else {
                    return Err(invalid(format!("region caption `{}` is not `<color> <shape>`", e.caption)));
                };
                Ok(SceneEntity {
                    shape: Shape::from_word(s)?,
                    color: Color::from_word(c)?,
                    bbox: BBox::from_array(e.bbox)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entities })
    }
}

/// Pixel rectangle of a normalised box on a `size x size` image.
pub fn pixel_box(b: &BBox, size: usize) -> Option<PixelBox> {
    let px = |v: f64| ((v * size as f64).round().max(0.0) as usize).min(size);
    let pb = PixelBox {
        x0: px(b.x0),
        y0: px(b.y0),
        x1: px(b.x1),
        y1: px(b.y1),
    };
    (pb.x1 > pb.x0 && pb.y1 > pb.y0).then_some(pb)
}

/// `[3, size, size]` rendering of a spec.
pub fn render(spec: &SceneSpec, size: usize) -> Tensor {
    let mut data = vec![0.0; 3 * size * size];
    for (c, v) in SceneSpec::BACKGROUND.iter().enumerate() {
        data[c * size * size..(c + 1) * size * size].fill(*v);
    }
    for e in &spec.entities {
        let Some(b) = pixel_box(&e.bbox, size) else { continue };
        let rgb = e.color.rgb();
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                if covers(e.shape, b, x, y) {
                    for (c, v) in rgb.iter().enumerate() {
                        data[c * size * size + y * size + x] = *v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("rendered image is well formed")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub spec: SceneSpec,
    pub image: Tensor,
}

/// Deterministic scene for `seed`.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Scene {
    let mut rng = SeedStream::new(seed).substream("scene").rng();
    let g = cfg.grid();
    let want = uniform_int(&mut rng, cfg.min_entities, cfg.max_entities);
    let mut cells: Vec<[usize; 4]> = Vec::new();
    let mut entities = Vec::new();
    for _ in 0..want {
        for _attempt in 0..64 {
            let w = uniform_int(&mut rng, cfg.min_cells, cfg.max_cells.min(g));
            let h = uniform_int(&mut rng, cfg.min_cells, cfg.max_cells.min(g));
            let x = uniform_int(&mut rng, 0, g - w);
            let y = uniform_int(&mut rng, 0, g - h);
            let gap = cfg.gap_cells;
            let clear = cells.iter().all(|&[cx, cy, cw, ch]| {
                x >= cx + cw + gap || cx >= x + w + gap || y >= cy + ch + gap || cy >= y + h + gap
            });
            if clear {
                cells.push([x, y, w, h]);
                let f = |v: usize| v as f64 / g as f64;
                entities.push(SceneEntity {
                    shape: Shape::ALL[uniform_int(&mut rng, 0, 2)],
                    color: Color::ALL[uniform_int(&mut rng, 0, 3)],
                    bbox: BBox::new(f(x), f(y), f(x + w), f(y + h)).expect("grid box is valid"),
                });
                break;
            }
        }
    }
    let spec = SceneSpec { entities };
    let image = render(&spec, cfg.image_size);
    Scene { seed, spec, image }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_scene(7, &cfg), gen_scene(7, &cfg));
        assert_ne!(gen_scene(7, &cfg).spec, gen_scene(8, &cfg).spec);
    }

    #[test]
    fn red_square_fills_its_box() {
        let spec = SceneSpec {
            entities: vec![SceneEntity {
                shape: Shape::Square,
                color: Color::Red,
                bbox: BBox::new(0.25, 0.25, 0.75, 0.75).unwrap(),
            }],
        };
        let img = render(&spec, 32);
        let d = img.data();
        let mut red = 0;
        for y in 8..24 {
            for x in 8..24 {
                let px = [d[y * 32 + x], d[1024 + y * 32 + x], d[2048 + y * 32 + x]];
                red += usize::from(px == [1.0, 0.0, 0.0]);
            }
        }
        assert!(red as f64 >= 0.95 * 256.0);
    }

    #[test]
    fn captions_round_trip_through_docs() {
        let s = gen_scene(3, &SceneConfig::default());
        let doc = s.spec.to_doc();
        assert_eq!(SceneSpec::from_doc(&doc).unwrap(), s.spec);
        let vocab = Vocabulary::default();
        assert!(s.spec.to_layout(&vocab, &TextShape::default()).is_ok());
    }
}
