//! Rule-based layout checks and coarse-input to box conversion.

use serde::{Deserialize, Serialize};

use crate::encoders::{BBox, EntityDoc, LayoutDoc};
use crate::error::{invalid, Result};
use crate::scenes::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// A coordinate is NaN or infinite.
    Finite,
    /// Top-left must be strictly above and left of bottom-right.
    CornerOrder,
    /// Every coordinate lies in `[0, 1]`.
    Bounds,
    /// Dataset mode: box covers at least the minimum image fraction.
    MinArea,
    /// Dataset mode: entity count inside the allowed range.
    Count,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Format,
    Dataset,
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "format" => Ok(Mode::Format),
            "dataset" => Ok(Mode::Dataset),
            _ => Err(invalid(format!("unknown validation mode `{s}`"))),
        }
    }
}

/// Thresholds for dataset mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRules {
    pub min_area: f64,
    pub min_entities: usize,
    pub max_entities: usize,
}

impl Default for DatasetRules {
    fn default() -> Self {
        Self {
            min_area: 0.02,
            min_entities: 3,
            max_entities: 10,
        }
    }
}

impl DatasetRules {
    /// Area rule unchanged, count range taken from the scene generator.
    pub fn for_scenes(cfg: &SceneConfig) -> Self {
        Self {
            min_entities: cfg.min_entities,
            max_entities: cfg.max_entities,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityVerdict {
    pub index: usize,
    pub violations: Vec<Rule>,
}

impl EntityVerdict {
    pub fn valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub mode: Mode,
    pub entities: Vec<EntityVerdict>,
    /// Violations of rules that apply to the layout as a whole.
    pub layout_violations: Vec<Rule>,
}

impl ValidationReport {
    pub fn valid(&self) -> bool {
        self.layout_violations.is_empty() && self.entities.iter().all(EntityVerdict::valid)
    }

    /// Valid entities over all entities; 1 for an empty layout.
    pub fn accuracy(&self) -> f64 {
        if self.entities.is_empty() {
            return 1.0;
        }
        self.entities.iter().filter(|e| e.valid()).count() as f64 / self.entities.len() as f64
    }
}

/// Fraction of fully valid layouts.
pub fn suite_accuracy(reports: &[ValidationReport]) -> f64 {
    if reports.is_empty() {
        return 1.0;
    }
    reports.iter().filter(|r| r.valid()).count() as f64 / reports.len() as f64
}

fn box_violations(b: &[f64; 4], mode: Mode, rules: &DatasetRules) -> Vec<Rule> {
    if !b.iter().all(|v| v.is_finite()) {
        return vec![Rule::Finite];
    }
    let [x0, y0, x1, y1] = *b;
    let mut v = Vec::new();
    let ordered = x0 < x1 && y0 < y1;
    if !ordered {
        v.push(Rule::CornerOrder);
    }
    if !b.iter().all(|c| (0.0..=1.0).contains(c)) {
        v.push(Rule::Bounds);
    }
    // Area is only meaningful for an ordered box.
    if mode == Mode::Dataset && ordered && (x1 - x0) * (y1 - y0) < rules.min_area {
        v.push(Rule::MinArea);
    }
    v
}

/// Check a layout document. Never fails; problems are reported.
pub fn validate(doc: &LayoutDoc, mode: Mode, rules: &DatasetRules) -> ValidationReport {
    let entities = doc
        .entities
        .iter()
        .enumerate()
        .map(|(index, e)| EntityVerdict {
            index,
            violations: box_violations(&e.bbox, mode, rules),
        })
        .collect();
    let n = doc.entities.len();
    let mut layout_violations = Vec::new();
    if mode == Mode::Dataset && !(rules.min_entities..=rules.max_entities).contains(&n) {
        layout_violations.push(Rule::Count);
    }
    ValidationReport {
        mode,
        entities,
        layout_violations,
    }
}

/// Row-major binary grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || cells.len() != rows * cols {
            return Err(invalid(format!("mask of {} cells is not {rows}x{cols}", cells.len())));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.cols + j]
    }
}

impl TryFrom<Vec<Vec<u8>>> for Mask {
    type Error = crate::Error;

    fn try_from(grid: Vec<Vec<u8>>) -> Result<Self> {
        let rows = grid.len();
        let cols = grid.first().map_or(0, Vec::len);
        if grid.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged mask rows"));
        }
        Mask::new(rows, cols, grid.into_iter().flatten().map(|c| c != 0).collect())
    }
}

impl From<Mask> for Vec<Vec<u8>> {
    fn from(m: Mask) -> Self {
        m.cells.chunks(m.cols).map(|r| r.iter().map(|&c| u8::from(c)).collect()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointHint {
    pub center: [f64; 2],
    #[serde(default)]
    pub size: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseInput {
    Mask(Mask),
    Scribble(Vec<[f64; 2]>),
    Point(PointHint),
}

impl CoarseInput {
    pub fn kind(&self) -> &'static str {
        match self {
            CoarseInput::Mask(_) => "mask",
            CoarseInput::Scribble(_) => "scribble",
            CoarseInput::Point(_) => "point",
        }
    }
}

/// Tunable conversion constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertRules {
    /// Scribble padding as a fraction of each image side.
    pub scribble_pad: f64,
    /// Side of the square placed around a bare point.
    pub point_size: f64,
}

impl Default for ConvertRules {
    fn default() -> Self {
        Self {
            scribble_pad: 0.05,
            point_size: 0.2,
        }
    }
}

/// Tight box over the set cells, normalised by grid size.
pub fn mask_to_bbox(mask: &Mask) -> Result<BBox> {
    let (mut i0, mut i1, mut j0, mut j1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..mask.rows {
        for j in 0..mask.cols {
            if mask.get(i, j) {
                i0 = i0.min(i);
                i1 = i1.max(i);
                j0 = j0.min(j);
                j1 = j1.max(j);
            }
        }
    }
    if i0 == usize::MAX {
        return Err(invalid("empty mask"));
    }
    let (r, c) = (mask.rows as f64, mask.cols as f64);
    BBox::new(j0 as f64 / c, i0 as f64 / r, (j1 + 1) as f64 / c, (i1 + 1) as f64 / r)
}

fn in_unit(p: &[f64; 2]) -> bool {
    p.iter().all(|v| (0.0..=1.0).contains(v))
}

/// Extent of the points padded by `pad` on every side, clamped to the image.
pub fn scribble_to_bbox(points: &[[f64; 2]], pad: f64) -> Result<BBox> {
    if points.len() < 2 {
        return Err(invalid("scribble needs at least two points"));
    }
    if !points.iter().all(in_unit) {
        return Err(invalid("scribble point outside the unit square"));
    }
    let lo = |k: usize| points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
    let c = |v: f64| v.clamp(0.0, 1.0);
    BBox::new(c(lo(0) - pad), c(lo(1) - pad), c(hi(0) + pad), c(hi(1) + pad))
}

/// Square of side `size` centred on the point, slid inward if it would
/// cross the image edge.
pub fn point_to_bbox(center: [f64; 2], size: f64) -> Result<BBox> {
    if !in_unit(&center) {
        return Err(invalid("point outside the unit square"));
    }
    if !(size > 0.0) {
        return Err(invalid(format!("point size {size} must be positive")));
    }
    let s = size.min(1.0);
    let lo = |v: f64| (v - s / 2.0).clamp(0.0, 1.0 - s);
    let (x0, y0) = (lo(center[0]), lo(center[1]));
    BBox::new(x0, y0, (x0 + s).min(1.0), (y0 + s).min(1.0))
}

pub fn convert(input: &CoarseInput, rules: &ConvertRules) -> Result<BBox> {
    match input {
        CoarseInput::Mask(m) => mask_to_bbox(m),
        CoarseInput::Scribble(p) => scribble_to_bbox(p, rules.scribble_pad),
        CoarseInput::Point(p) => point_to_bbox(p.center, p.size.unwrap_or(rules.point_size)),
    }
}

/// A layout document whose entities carry coarse inputs instead of boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseDoc {
    pub caption: String,
    pub entities: Vec<CoarseEntity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseEntity {
    pub caption: String,
    #[serde(flatten)]
    pub input: CoarseInput,
}

impl CoarseDoc {
    pub fn to_layout(&self, rules: &ConvertRules) -> Result<LayoutDoc> {
        let entities = self
            .entities
            .iter()
            .map(|e| {
                Ok(EntityDoc {
                    bbox: convert(&e.input, rules)?.to_array(),
                    caption: e.caption.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayoutDoc {
            caption: self.caption.clone(),
            entities,
        })
    }
}

/// Layouts that each break exactly one rule, paired with that rule.
pub fn adversarial_suite(rules: &DatasetRules) -> Vec<(Rule, LayoutDoc)> {
    let ent = |bbox: [f64; 4]| EntityDoc {
        bbox,
        caption: "red circle".into(),
    };
    let good = [[0.0, 0.0, 0.3, 0.3], [0.35, 0.0, 0.65, 0.3], [0.7, 0.0, 1.0, 0.3]];
    let pad_to_min = |mut e: Vec<EntityDoc>| {
        let mut k = 0;
        while e.len() < rules.min_entities {
            e.push(ent(good[k % good.len()]));
            k += 1;
        }
        e
    };
    let doc = |entities: Vec<EntityDoc>| LayoutDoc {
        caption: "a red circle".into(),
        entities,
    };
    let side = (rules.min_area / 2.0).sqrt();
    let mut suite = Vec::new();
    for b in [
        [0.5, 0.5, 0.4, 0.9],
        [0.2, 0.6, 0.5, 0.3],
        [0.3, 0.3, 0.3, 0.6],
        [0.1, 0.4, 0.6, 0.4],
    ] {
        suite.push((Rule::CornerOrder, doc(pad_to_min(vec![ent(b)]))));
    }
    for b in [
        [-0.1, 0.2, 0.5, 0.6],
        [0.2, -0.3, 0.5, 0.6],
        [0.2, 0.2, 1.2, 0.6],
        [0.2, 0.2, 0.5, 1.01],
    ] {
        suite.push((Rule::Bounds, doc(pad_to_min(vec![ent(b)]))));
    }
    for b in [[f64::NAN, 0.1, 0.5, 0.5], [0.1, 0.1, f64::INFINITY, 0.5]] {
        suite.push((Rule::Finite, doc(pad_to_min(vec![ent(b)]))));
    }
    suite.push((Rule::MinArea, doc(pad_to_min(vec![ent([0.4, 0.4, 0.4 + side, 0.4 + side])]))));
    suite.push((Rule::MinArea, doc(pad_to_min(vec![ent([0.0, 0.0, 0.01, 1.0])]))));
    if rules.min_entities > 0 {
        let few: Vec<EntityDoc> = (0..rules.min_entities - 1).map(|k| ent(good[k % good.len()])).collect();
        suite.push((Rule::Count, doc(few)));
    }
    let many: Vec<EntityDoc> = (0..=rules.max_entities)
        .map(|k| {
            let x = (k % 10) as f64 * 0.1;
            let y = (k / 10) as f64 * 0.5;
            ent([x, y, x + 0.1, y + 0.4])
        })
        .collect();
    suite.push((Rule::Count, doc(many)));
    suite
}
