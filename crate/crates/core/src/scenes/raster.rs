use serde::{Deserialize, Serialize};

use crate::encoders::{COLORS, SHAPES};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }

    pub fn from_word(w: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.word() == w)
            .ok_or_else(|| invalid(format!("unknown shape `{w}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        COLORS[self as usize]
    }

    pub fn from_word(w: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.word() == w)
            .ok_or_else(|| invalid(format!("unknown color `{w}`")))
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Self::Red => [1.0, 0.0, 0.0],
            Self::Green => [0.0, 1.0, 0.0],
            Self::Blue => [0.0, 0.0, 1.0],
            Self::Yellow => [1.0, 1.0, 0.0],
        }
    }

    /// Palette entry nearest to `rgb` in Euclidean distance.
    pub fn nearest(rgb: [f64; 3]) -> Self {
        let d2 = |c: Color| {
            let p = c.rgb();
            (0..3).map(|i| (p[i] - rgb[i]).powi(2)).sum::<f64>()
        };
        Self::ALL
            .into_iter()
            .min_by(|a, b| d2(*a).total_cmp(&d2(*b)))
            .expect("palette is non-empty")
    }
}

/// Inclusive-exclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Whether pixel `(x, y)` belongs to `shape` drawn to fill `b`.
pub fn covers(shape: Shape, b: PixelBox, x: usize, y: usize) -> bool {
    if !b.contains(x, y) {
        return false;
    }
    let (w, h) = (b.width() as f64, b.height() as f64);
    let (px, py) = (x as f64 + 0.5 - b.x0 as f64, y as f64 + 0.5 - b.y0 as f64);
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let (dx, dy) = ((px - w / 2.0) / (w / 2.0), (py - h / 2.0) / (h / 2.0));
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => {
            // Apex at top centre, base along the bottom edge.
            let half = py / h * w / 2.0;
            (px - w / 2.0).abs() <= half + 0.5
        }
    }
}

/// Binary template of `shape` over the pixels of `b`, row-major.
pub fn template(shape: Shape, b: PixelBox) -> Vec<bool> {
    let mut out = Vec::with_capacity(b.area());
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            out.push(covers(shape, b, x, y));
        }
    }
    out
}
