use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{normal, uniform_int, Rng};

/// Linear-β DDPM noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    t_max: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

impl Schedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                let f = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        // alpha_bar[0] is the clean-data convention.
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self {
            t_max,
            betas,
            alpha_bar,
        }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if t > self.t_max {
            return Err(invalid(format!("timestep {t} outside 0..={}", self.t_max)));
        }
        if z0.len() != eps.len() {
            return Err(invalid("q_sample: z0 and noise lengths differ"));
        }
        let a = self.alpha_bar[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(z0.iter().zip(eps).map(|(z, e)| sa * z + sn * e).collect())
    }
}

/// Standard deviation of a mixture component, as a function of `T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum SigmaRule {
    /// `σ = f·T`.
    Fraction(f64),
    /// `σ = T`.
    Literal,
    /// `σ = √T`, reading the second parameter as a variance.
    Variance,
}

impl SigmaRule {
    pub fn sigma(self, t_max: usize) -> f64 {
        match self {
            Self::Fraction(f) => f * t_max as f64,
            Self::Literal => t_max as f64,
            Self::Variance => (t_max as f64).sqrt(),
        }
    }
}

/// Training-timestep distribution: uniform, or a two-component truncated
/// normal mixture favouring high noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimestepSampler {
    pub bias: bool,
    pub p1: f64,
    /// Component centres as fractions of `T`.
    pub center1: f64,
    pub center2: f64,
    pub sigma1: SigmaRule,
    pub sigma2: SigmaRule,
}

impl Default for TimestepSampler {
    fn default() -> Self {
        Self {
            bias: false,
            p1: 0.7,
            center1: 0.7,
            center2: 0.0,
            sigma1: SigmaRule::Fraction(0.2),
            sigma2: SigmaRule::Fraction(0.2),
        }
    }
}

/// Which part of the sampler produced a timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestepTag {
    Uniform,
    Component1,
    Component2,
}

impl TimestepSampler {
    pub fn biased() -> Self {
        Self {
            bias: true,
            ..Self::default()
        }
    }

    /// Draw `t` in `1..=T`. The component is chosen first; draws are then
    /// repeated within that component until they round into range.
    pub fn sample(&self, t_max: usize, rng: &mut Rng) -> (usize, TimestepTag) {
        if !self.bias {
            return (uniform_int(rng, 1, t_max), TimestepTag::Uniform);
        }
        let first = crate::rng::uniform(rng) < self.p1;
        let (tag, center, sigma) = if first {
            (TimestepTag::Component1, self.center1, self.sigma1)
        } else {
            (TimestepTag::Component2, self.center2, self.sigma2)
        };
        let (mu, sd) = (center * t_max as f64, sigma.sigma(t_max));
        loop {
            let t = (mu + sd * normal(rng)).round();
            if t >= 1.0 && t <= t_max as f64 {
                return (t as usize, tag);
            }
        }
    }
}
