//! Token streams: image patches, caption embeddings and layout tokens.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::Linear;

pub const PAD: usize = 0;
pub const PAD_TOKEN: &str = "<pad>";
pub const MAX_VOCAB: usize = 256;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const GLUE: [&str; 11] = [
    "a", "and", "left", "right", "top", "bottom", "center", "above", "below", "of", "the",
];

/// Whitespace-token vocabulary; id 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let words = std::iter::once(PAD_TOKEN)
            .chain(GLUE)
            .chain(COLORS)
            .chain(SHAPES);
        Self::from_tokens(words.map(str::to_owned).collect()).expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    /// Tokens in id order; the first must be the padding token.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(invalid("vocabulary id 0 must be <pad>"));
        }
        if tokens.len() > MAX_VOCAB {
            return Err(invalid(format!("vocabulary of {} exceeds {MAX_VOCAB}", tokens.len())));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { ids, tokens })
    }

    /// Parse a JSON object `token -> id` with ids dense in `[0, size)`.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (t, &i) in &map {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| invalid(format!("id {i} of `{t}` is not dense")))?;
            *slot = Some(t.clone());
        }
        let tokens = tokens
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| invalid("vocabulary ids are not dense"))?;
        Self::from_tokens(tokens)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.ids).expect("map serialises")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_owned()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace tokenisation padded to exactly `len` ids.
    pub fn encode(&self, text: &str, len: usize) -> Result<Vec<usize>> {
        let mut ids = text.split_whitespace().map(|w| self.id(w)).collect::<Result<Vec<_>>>()?;
        if ids.len() > len {
            return Err(invalid(format!("`{text}` has {} tokens, limit {len}", ids.len())));
        }
        ids.resize(len, PAD);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Normalised box with `(x0, y0)` top-left and `(x1, y1)` bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].into_iter().all(in_unit) {
            return Err(invalid(format!("invalid box ({x0}, {y0}, {x1}, {y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn from_array(b: [f64; 4]) -> Result<Self> {
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// On-disk layout document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutDoc {
    pub caption: String,
    #[serde(default)]
    pub entities: Vec<EntityDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityDoc {
    pub bbox: [f64; 4],
    pub caption: String,
}

impl LayoutDoc {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Fixed token lengths for captions and the entity cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextShape {
    pub caption_len: usize,
    pub region_len: usize,
    pub max_entities: usize,
}

impl Default for TextShape {
    fn default() -> Self {
        Self {
            caption_len: 16,
            region_len: 4,
            max_entities: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub caption: Vec<usize>,
    pub bbox: BBox,
}

/// Tokenised instruction: global caption plus entities.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Layout {
    pub caption: Vec<usize>,
    pub entities: Vec<Entity>,
}

impl Layout {
    pub fn encode(doc: &LayoutDoc, vocab: &Vocabulary, shape: &TextShape) -> Result<Self> {
        if doc.entities.len() > shape.max_entities {
            return Err(invalid(format!(
                "{} entities exceed the limit of {}",
                doc.entities.len(),
                shape.max_entities
            )));
        }
        let caption = vocab.encode(&doc.caption, shape.caption_len)?;
        let entities = doc
            .entities
            .iter()
            .map(|e| {
                Ok(Entity {
                    caption: vocab.encode(&e.caption, shape.region_len)?,
                    bbox: BBox::from_array(e.bbox)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { caption, entities })
    }

    pub fn decode(&self, vocab: &Vocabulary) -> LayoutDoc {
        LayoutDoc {
            caption: vocab.decode(&self.caption),
            entities: self
                .entities
                .iter()
                .map(|e| EntityDoc {
                    bbox: e.bbox.to_array(),
                    caption: vocab.decode(&e.caption),
                })
                .collect(),
        }
    }

    /// Same caption, no entities.
    pub fn without_entities(&self) -> Self {
        Self {
            caption: self.caption.clone(),
            entities: Vec::new(),
        }
    }
}

/// `[3, H, W]` image to `[(H/p)(W/p), 3p²]` tokens, patches in row-major
/// grid order, each patch laid out channel-major.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let [c, h, w] = image_dims(image)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(invalid(format!("patch size {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = c * p * p;
    let src = image.data();
    let mut out = vec![0.0; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (gy * p + dy, gx * p + dx);
                        out[tok * dim + ch * p * p + dy * p + dx] = src[ch * h * w + y * w + x];
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, channels: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(invalid(format!("patch size {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = channels * p * p;
    if tokens.shape() != [gh * gw, dim] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            left: tokens.shape().to_vec(),
            right: vec![gh * gw, dim],
        });
    }
    let src = tokens.data();
    let mut out = vec![0.0; channels * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            for ch in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (gy * p + dy, gx * p + dx);
                        out[ch * h * w + y * w + x] = src[tok * dim + ch * p * p + dy * p + dx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, h, w], out)
}

fn image_dims(image: &Tensor) -> Result<[usize; 3]> {
    match *image.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(invalid(format!("expected [C,H,W] image, got {:?}", image.shape()))),
    }
}

/// Caption embedding: row `i` is `table[ids[i]]`.
pub fn embed_caption(g: &mut Graph<'_>, table: Var, ids: &[usize]) -> Result<Var> {
    g.gather_rows(table, ids)
}

/// Sinusoidal box features, coordinate-major then frequency:
/// for `v` in `(x0, y0, x1, y1)` and `k < freqs`, `sin(2^k π v), cos(2^k π v)`.
pub fn fourier_embed(b: &BBox, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(8 * freqs);
    for v in b.to_array() {
        for k in 0..freqs {
            let a = f64::from(1u32 << k) * PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Fixed 2-D sinusoidal position vectors for an `gh x gw` token grid.
pub fn grid_positions(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = vec![0.0; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * dim..(gy * gw + gx + 1) * dim];
            for (half, pos) in [(0, gx as f64), (1, gy as f64)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
                    row[half * 2 * quarter + i] = (pos * omega).sin();
                    row[half * 2 * quarter + quarter + i] = (pos * omega).cos();
                }
            }
        }
    }
    out
}

/// Fixed 1-D sinusoidal position vectors for `len` caption tokens.
pub fn sequence_positions(len: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..half {
            let omega = 1.0 / 10_000f64.powf(i as f64 / half.max(1) as f64);
            out[p * dim + i] = (p as f64 * omega).sin();
            out[p * dim + half + i] = (p as f64 * omega).cos();
        }
    }
    out
}

/// Two-layer GELU MLP over `[pooled caption, Fourier(box)]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freqs: usize,
}

impl LayoutEncoder {
    /// Layout tokens `[N, d]` in entity order, or `None` for an empty layout.
    pub fn tokens(&self, g: &mut Graph<'_>, bound: &[Var], table: Var, entities: &[Entity]) -> Result<Option<Var>> {
        if entities.is_empty() {
            return Ok(None);
        }
        let mut ids = Vec::new();
        let mut groups = Vec::with_capacity(entities.len());
        for e in entities {
            let words: Vec<usize> = e.caption.iter().copied().filter(|&i| i != PAD).collect();
            if words.is_empty() {
                return Err(invalid("entity caption has no words"));
            }
            groups.push((ids.len()..ids.len() + words.len()).collect());
            ids.extend(words);
        }
        let emb = g.gather_rows(table, &ids)?;
        let pooled = g.mean_rows(emb, &groups)?;
        let fourier: Vec<f64> = entities.iter().flat_map(|e| fourier_embed(&e.bbox, self.freqs)).collect();
        let fourier = g.constant(entities.len(), 8 * self.freqs, fourier)?;
        let x = g.concat_cols(&[pooled, fourier])?;
        let h = self.fc1.apply(g, bound, x)?;
        let h = g.gelu(h)?;
        self.fc2.apply(g, bound, h).map(Some)
    }

    pub fn macs(&self, n: usize) -> u64 {
        self.fc1.macs(n) + self.fc2.macs(n)
    }
}
