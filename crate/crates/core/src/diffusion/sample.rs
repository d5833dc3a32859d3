use crate::encoders::{unpatchify, Layout};
use crate::error::{invalid, Result};
use crate::mmdit::Model;
use crate::numcore::Tensor;
use crate::rng::{normal_vec, SeedStream};

use super::schedule::Schedule;

/// Number of leading sampler steps that see the layout: `⌈0.3·S⌉`.
pub fn layout_steps(steps: usize) -> usize {
    (3 * steps).div_ceil(10)
}

/// Descending timesteps `t_i = ⌈(i+1)·T/S⌉`, highest noise first.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..steps).map(|i| ((i + 1) * t_max).div_ceil(steps)).collect();
    ts.reverse();
    ts
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Layout-path invocations recorded at each sampler step, in order.
    pub layout_calls: Vec<usize>,
}

/// DDIM reverse process. `eta = 0` is deterministic given the seed of the
/// starting noise.
pub fn sample_image(model: &Model, schedule: &Schedule, layout: &Layout, steps: usize, eta: f64, seed: u64) -> Result<SampleOutput> {
    if steps == 0 {
        return Err(invalid("sampler needs at least one step"));
    }
    let cfg = &model.config;
    let (tz, pd) = (cfg.image_tokens(), cfg.patch_dim());
    let mut rng = SeedStream::new(seed).substream("sample").rng();
    let mut x = normal_vec(&mut rng, tz * pd);
    let ts = ddim_timesteps(schedule.t_max(), steps);
    let active = layout_steps(steps);
    let mut calls = Vec::with_capacity(steps);
    let mut x0 = vec![0.0; x.len()];
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let tokens = Tensor::matrix(tz, pd, x.clone())?;
        let (eps, n) = model.predict(&tokens, t, layout, i < active)?;
        calls.push(n);
        let (a, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let sigma = eta * ((1.0 - ap) / (1.0 - a)).sqrt() * (1.0 - a / ap).sqrt();
        let dir = (1.0 - ap - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 { normal_vec(&mut rng, x.len()) } else { vec![0.0; x.len()] };
        for j in 0..x.len() {
            let e = eps.data()[j];
            x0[j] = ((x[j] - (1.0 - a).sqrt() * e) / a.sqrt()).clamp(-1.0, 1.0);
            x[j] = ap.sqrt() * x0[j] + dir * e + sigma * noise[j];
        }
    }
    let pixels: Vec<f64> = x0.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    let image = unpatchify(&Tensor::matrix(tz, pd, pixels)?, cfg.channels, cfg.image_size, cfg.image_size, cfg.patch)?;
    Ok(SampleOutput {
        image,
        layout_calls: calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn active_prefix_uses_integer_ceiling() {
        assert_eq!(layout_steps(1), 1);
        assert_eq!(layout_steps(10), 3);
        assert_eq!(layout_steps(50), 15);
        assert_eq!(layout_steps(7), 3);
    }

    #[test]
    fn timesteps_descend_to_low_noise() {
        assert_eq!(ddim_timesteps(1000, 1), vec![1000]);
        let ts = ddim_timesteps(1000, 50);
        assert_eq!(ts.first(), Some(&1000));
        assert_eq!(ts.last(), Some(&20));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}
