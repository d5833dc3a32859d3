use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::Tensor;

use super::raster::{template, Color, PixelBox, Shape};
use super::{pixel_box, SceneSpec};

/// Oracle thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// L∞ distance to the background above which a pixel is foreground.
    pub fg_threshold: f64,
    pub min_fill: f64,
    pub min_shape_iou: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fg_threshold: 0.25,
            min_fill: 0.30,
            min_shape_iou: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityVerdict {
    pub spatial: bool,
    pub color: bool,
    pub shape: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub entities: Vec<EntityVerdict>,
}

impl OracleReport {
    fn rate(&self, f: impl Fn(&EntityVerdict) -> bool) -> f64 {
        if self.entities.is_empty() {
            return 0.0;
        }
        self.entities.iter().filter(|v| f(v)).count() as f64 / self.entities.len() as f64
    }

    pub fn spatial(&self) -> f64 {
        self.rate(|v| v.spatial)
    }

    pub fn color(&self) -> f64 {
        self.rate(|v| v.color)
    }

    pub fn shape(&self) -> f64 {
        self.rate(|v| v.shape)
    }

    pub fn merge(&mut self, other: &OracleReport) {
        self.entities.extend_from_slice(&other.entities);
    }
}

/// Foreground mask of a `[3, H, W]` image, row-major.
pub fn foreground(image: &Tensor, threshold: f64) -> Result<Vec<bool>> {
    let [3, h, w] = *image.shape() else {
        return Err(invalid(format!("oracle expects an RGB image, got {:?}", image.shape())));
    };
    let d = image.data();
    let bg = SceneSpec::BACKGROUND;
    Ok((0..h * w)
        .map(|i| (0..3).any(|c| (d[c * h * w + i] - bg[c]).abs() > threshold))
        .collect())
}

/// 4-connected components of a `w x h` mask, each a list of pixel indices.
pub fn components(mask: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Vec::new();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (x, y) = (p % w, p / w);
            let mut push = |q: usize| {
                if mask[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        out.push(comp);
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Score every entity of `spec` against `image` (values in `[0, 1]`).
pub fn oracle_eval(image: &Tensor, spec: &SceneSpec, cfg: &OracleConfig) -> Result<OracleReport> {
    let fg = foreground(image, cfg.fg_threshold)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h != w {
        return Err(invalid("oracle expects a square image"));
    }
    let comps = components(&fg, w, h);
    let mut comp_of = vec![usize::MAX; fg.len()];
    for (i, c) in comps.iter().enumerate() {
        for &p in c {
            comp_of[p] = i;
        }
    }
    let d = image.data();
    let mut report = OracleReport::default();
    for e in &spec.entities {
        let Some(b) = pixel_box(&e.bbox, w) else {
            report.entities.push(EntityVerdict::default());
            continue;
        };
        let inside: Vec<usize> = (b.y0..b.y1)
            .flat_map(|y| (b.x0..b.x1).map(move |x| y * w + x))
            .filter(|&p| fg[p])
            .collect();
        if inside.is_empty() {
            report.entities.push(EntityVerdict::default());
            continue;
        }
        let fill = inside.len() as f64 / b.area() as f64;

        // Centroid of the full components that reach into the box.
        let mut touched: Vec<usize> = inside.iter().map(|&p| comp_of[p]).collect();
        touched.sort_unstable();
        touched.dedup();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for &c in &touched {
            for &p in &comps[c] {
                sx += (p % w) as f64 + 0.5;
                sy += (p / w) as f64 + 0.5;
                n += 1.0;
            }
        }
        let (cx, cy) = (sx / n, sy / n);
        let centred = cx >= b.x0 as f64 && cx <= b.x1 as f64 && cy >= b.y0 as f64 && cy <= b.y1 as f64;
        let spatial = fill >= cfg.min_fill && centred;

        let channel = |c: usize| median(inside.iter().map(|&p| d[c * h * w + p]).collect());
        let color = Color::nearest([channel(0), channel(1), channel(2)]) == e.color;

        let shape = shape_hit(&fg, w, b, e.shape, cfg.min_shape_iou);
        report.entities.push(EntityVerdict { spatial, color, shape });
    }
    Ok(report)
}

/// Fit each template to the foreground's extent within `b` and require the
/// best match to be `want` with enough overlap.
fn shape_hit(fg: &[bool], w: usize, b: PixelBox, want: Shape, min_iou: f64) -> bool {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            if fg[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return false;
    }
    let ext = PixelBox { x0, y0, x1, y1 };
    let observed: Vec<bool> = (y0..y1).flat_map(|y| (x0..x1).map(move |x| fg[y * w + x])).collect();
    let mut best = (Shape::Circle, -1.0);
    for s in Shape::ALL {
        let t = template(s, ext);
        let inter = t.iter().zip(&observed).filter(|(a, b)| **a && **b).count();
        let union = t.iter().zip(&observed).filter(|(a, b)| **a || **b).count();
        let iou = inter as f64 / union.max(1) as f64;
        if iou > best.1 {
            best = (s, iou);
        }
    }
    best.0 == want && best.1 >= min_iou
}

#[cfg(test)]
mod tests {
    use super::super::{gen_scene, render, SceneConfig, SceneEntity};
    use super::*;
    use crate::encoders::BBox;

    #[test]
    fn ground_truth_scores_full_marks() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = gen_scene(seed, &cfg);
            let r = oracle_eval(&s.image, &s.spec, &OracleConfig::default()).unwrap();
            assert_eq!((r.spatial(), r.color(), r.shape()), (1.0, 1.0, 1.0), "seed {seed}");
        }
    }

    #[test]
    fn blank_image_scores_zero() {
        let s = gen_scene(1, &SceneConfig::default());
        let blank = Tensor::zeros(&[3, 32, 32]);
        let r = oracle_eval(&blank, &s.spec, &OracleConfig::default()).unwrap();
        assert_eq!((r.spatial(), r.color(), r.shape()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn wrong_entity_in_right_place() {
        let b = BBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let drawn = SceneSpec {
            entities: vec![SceneEntity {
                shape: Shape::Circle,
                color: Color::Red,
                bbox: b,
            }],
        };
        let asked = SceneSpec {
            entities: vec![SceneEntity {
                shape: Shape::Square,
                color: Color::Blue,
                bbox: b,
            }],
        };
        let r = oracle_eval(&render(&drawn, 32), &asked, &OracleConfig::default()).unwrap();
        assert_eq!(r.entities[0], EntityVerdict { spatial: true, color: false, shape: false });
    }
}
