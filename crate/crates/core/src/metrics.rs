//! Quantitative diagnostics: velocity jumps, trajectory deviation, PSNR and
//! SSIM over latents.
//!
//! SSIM needs a spatial layout, so image tokens are read as a row-major
//! `g × g` grid. On latents this is a structural proxy, not pixel SSIM.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::model::{Conditioning, EditMask, Injection, InjectionHooks, KvCache, VelocityField};
use crate::solver::Trajectory;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_MAX_WINDOW: usize = 7;

/// Named metrics for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub run_id: usize,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// `max(a) − min(a)`, or 1 when `a` is constant.
pub fn default_peak(reference: &Latent) -> f64 {
    let (lo, hi) = reference
        .values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.array().len() as f64;
    Ok(a.values().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(peak² / mse)`; `+inf` for zero error.
pub fn psnr_from_mse(mse: f64, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::Domain {
            name: "peak",
            value: peak,
            expected: "(0, inf)",
        });
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(a: &Latent, b: &Latent, peak: f64) -> Result<f64> {
    psnr_from_mse(mse(a, b)?, peak)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Odd Gaussian window size; defaults to the largest odd size ≤ min(7, g).
    pub window: Option<usize>,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl SsimParams {
    pub fn with_peak(peak: f64) -> Self {
        Self {
            window: None,
            sigma: SSIM_SIGMA,
            k1: SSIM_K1,
            k2: SSIM_K2,
            peak,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size / 2) as f64;
    let mut w = Array2::from_shape_fn((size, size), |(i, j)| {
        let (dy, dx) = (i as f64 - c, j as f64 - c);
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    let sum = w.sum();
    w /= sum;
    w
}

/// Mean SSIM over channels (and batch) on the token grid.
pub fn ssim(a: &Latent, b: &Latent, params: &SsimParams) -> Result<f64> {
    a.same_shape(b)?;
    let (batch, l, c) = a.dims();
    let g = (l as f64).sqrt().round() as usize;
    if g * g != l {
        return Err(Error::Shape(format!("{l} tokens do not form a square grid")));
    }
    let window = match params.window {
        Some(w) => w,
        None => {
            let w = SSIM_MAX_WINDOW.min(g);
            if w.is_multiple_of(2) {
                w - 1
            } else {
                w
            }
        }
    };
    if window.is_multiple_of(2) || window == 0 || window > g {
        return Err(Error::Shape(format!(
            "ssim window {window} must be odd and at most the grid side {g}"
        )));
    }
    if params.peak.is_nan() || params.peak <= 0.0 {
        return Err(Error::Domain {
            name: "peak",
            value: params.peak,
            expected: "(0, inf)",
        });
    }
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let w = gaussian_window(window, params.sigma);
    let positions = g - window + 1;

    let mut total = 0.0;
    for bi in 0..batch {
        for ci in 0..c {
            let pa = |y: usize, x: usize| a.get(bi, y * g + x, ci);
            let pb = |y: usize, x: usize| b.get(bi, y * g + x, ci);
            let mut channel_sum = 0.0;
            for oy in 0..positions {
                for ox in 0..positions {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for ((i, j), wt) in w.indexed_iter() {
                        ma += wt * pa(oy + i, ox + j);
                        mb += wt * pb(oy + i, ox + j);
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for ((i, j), wt) in w.indexed_iter() {
                        let da = pa(oy + i, ox + j) - ma;
                        let db = pb(oy + i, ox + j) - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                    channel_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            total += channel_sum / (positions * positions) as f64;
        }
    }
    Ok(total / (batch * c) as f64)
}

/// L2 distance between corresponding states.
pub fn per_step_distances(a: &Trajectory, b: &Trajectory) -> Result<Vec<f64>> {
    if a.states.len() != b.states.len() {
        return Err(Error::Shape(format!(
            "trajectories have {} and {} states",
            a.states.len(),
            b.states.len()
        )));
    }
    a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| x.l2_distance(y))
        .collect()
}

/// Largest per-step L2 distance between two trajectories.
pub fn trajectory_deviation(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    Ok(per_step_distances(a, b)?.into_iter().fold(0.0, f64::max))
}

/// Where and how cached source features are injected for a jump probe.
#[derive(Debug, Clone, Copy)]
pub struct JumpProbe<'a> {
    pub cache: &'a KvCache,
    pub step: usize,
    pub mask: Option<&'a EditMask>,
    pub global_mix: bool,
}

/// L2 norm of the velocity difference between two injection settings at the
/// same `(z, t, cond)`. `None` means no injection; otherwise one ratio per
/// layer.
pub fn velocity_change<V: VelocityField + ?Sized>(
    field: &V,
    z: &Latent,
    t: f64,
    cond: &Conditioning,
    probe: &JumpProbe<'_>,
    before: Option<&[f64]>,
    after: Option<&[f64]>,
) -> Result<f64> {
    let eval = |ratios: Option<&[f64]>| {
        let hooks = ratios.map(|r| {
            InjectionHooks::inject(
                probe.step,
                Injection {
                    cache: probe.cache,
                    mix_ratios: r.to_vec(),
                    background_mask: probe.mask,
                    global_mix: probe.global_mix,
                },
            )
        });
        field.evaluate(z, t, cond, hooks)
    };
    eval(before)?.l2_distance(&eval(after)?)
}

/// `‖v(z, t; cond, KV_src at ratio delta) − v(z, t; cond)‖₂`.
pub fn velocity_jump<V: VelocityField + ?Sized>(
    field: &V,
    z: &Latent,
    t: f64,
    cond: &Conditioning,
    probe: &JumpProbe<'_>,
    delta: f64,
) -> Result<f64> {
    for layer in 0..field.layer_count() {
        probe.cache.get(probe.step, layer).map_err(|_| {
            Error::State(format!(
                "velocity jump needs cached features for step {}, layer {layer}",
                probe.step
            ))
        })?;
    }
    let ratios = vec![delta; field.layer_count()];
    velocity_change(field, z, t, cond, probe, Some(&ratios), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_gaussian, synthetic_source, SeededRng};
    use crate::model::{AnalyticLinearFlow, ToyAttentionFlow, ToyConfig};
    use crate::solver::{integrate_forward, NoHooks, SolverKind, TimeGrid};

    #[test]
    fn psnr_values() {
        let a = sample_gaussian(&mut SeededRng::new(1), 1, 16, 2).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_from_mse(0.01, 1.0).unwrap(), 20.0);
        assert_eq!(psnr_from_mse(1.0, 1.0).unwrap(), 0.0);
        let b = Latent::from_fn(1, 16, 2, |(x, y, z)| a.get(x, y, z) + 0.1).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 0.0).is_err());
        assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_offset() {
        let a = synthetic_source(3, 1, 8, 3).unwrap();
        let p = SsimParams::with_peak(default_peak(&a));
        assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-9);
        let shifted = Latent::from_fn(1, 64, 3, |(b, l, c)| a.get(b, l, c) + 0.5 * default_peak(&a)).unwrap();
        let s = ssim(&a, &shifted, &p).unwrap();
        assert!(s < 1.0 && s > 0.0, "{s}");
    }

    #[test]
    fn negated_zero_mean_field_is_anticorrelated() {
        // one 7×7 window covering the grid; remove its weighted mean per channel
        let raw = sample_gaussian(&mut SeededRng::new(5), 1, 49, 2).unwrap();
        let w = gaussian_window(7, SSIM_SIGMA);
        let mean: Vec<f64> = (0..2)
            .map(|c| w.indexed_iter().map(|((i, j), wt)| wt * raw.get(0, i * 7 + j, c)).sum())
            .collect();
        let a = Latent::from_fn(1, 49, 2, |(b, l, c)| raw.get(b, l, c) - mean[c]).unwrap();
        let neg = Latent::from_fn(1, 49, 2, |(b, l, c)| -a.get(b, l, c)).unwrap();
        let s = ssim(&a, &neg, &SsimParams::with_peak(default_peak(&a))).unwrap();
        assert!(s < -0.9, "{s}");
    }

    #[test]
    fn ssim_noise_ladder() {
        let a = synthetic_source(4, 1, 16, 2).unwrap();
        let mut rng = SeededRng::new(9);
        let noise = sample_gaussian(&mut rng, 1, 256, 2).unwrap();
        let noisy = |s: f64| Latent::from_fn(1, 256, 2, |(b, l, c)| a.get(b, l, c) + s * noise.get(b, l, c)).unwrap();
        let p = SsimParams::with_peak(default_peak(&a));
        let low = ssim(&a, &noisy(0.1), &p).unwrap();
        let high = ssim(&a, &noisy(0.5), &p).unwrap();
        assert!(high < low && low < 1.0, "{high} {low}");
        let sym = ssim(&noisy(0.1), &a, &p).unwrap();
        assert!((sym - low).abs() < 1e-9);
    }

    #[test]
    fn ssim_shape_errors() {
        let a = Latent::zeros(1, 15, 1).unwrap();
        assert!(ssim(&a, &a, &SsimParams::with_peak(1.0)).is_err());
        let b = Latent::zeros(1, 16, 1).unwrap();
        let even = SsimParams { window: Some(2), ..SsimParams::with_peak(1.0) };
        assert!(ssim(&b, &b, &even).is_err());
        let wide = SsimParams { window: Some(5), ..SsimParams::with_peak(1.0) };
        assert!(ssim(&b, &b, &wide).is_err());
    }

    #[test]
    fn deviation_of_zero_field() {
        let f = AnalyticLinearFlow::new(0.0, vec![0.0]);
        let grid = TimeGrid::uniform(5).unwrap();
        let z = Latent::from_fn(1, 2, 1, |_| 1.0).unwrap();
        let z2 = Latent::from_vec(1, 2, 1, vec![1.0, 1.25]).unwrap();
        let a = integrate_forward(&f, &z, &grid, SolverKind::Euler, &Conditioning::empty(), &mut NoHooks).unwrap();
        let b = integrate_forward(&f, &z2, &grid, SolverKind::Euler, &Conditioning::empty(), &mut NoHooks).unwrap();
        assert_eq!(trajectory_deviation(&a, &a).unwrap(), 0.0);
        assert!(per_step_distances(&a, &b).unwrap().iter().all(|&d| d == 0.25));
        let short = integrate_forward(&f, &z, &TimeGrid::uniform(3).unwrap(), SolverKind::Euler, &Conditioning::empty(), &mut NoHooks).unwrap();
        assert!(trajectory_deviation(&a, &short).is_err());
    }

    #[test]
    fn jump_limits() {
        let model = ToyAttentionFlow::new(ToyConfig { seed: 4, ..Default::default() }).unwrap();
        let z = sample_gaussian(&mut SeededRng::new(2), 1, 16, 8).unwrap();
        let cond = Conditioning::new(vec![0, 1, 2, 3], 1).unwrap();
        let mut cache = KvCache::new();
        model.evaluate(&z, 0.3, &cond, Some(InjectionHooks::record(2, &mut cache))).unwrap();
        let probe = JumpProbe { cache: &cache, step: 2, mask: None, global_mix: false };
        assert_eq!(velocity_jump(&model, &z, 0.3, &cond, &probe, 0.0).unwrap(), 0.0);
        assert!(velocity_jump(&model, &z, 0.3, &cond, &probe, 1.0).unwrap() < 1e-6);
        // a different state makes the source features foreign
        let other = sample_gaussian(&mut SeededRng::new(3), 1, 16, 8).unwrap();
        assert!(velocity_jump(&model, &other, 0.3, &cond, &probe, 1.0).unwrap() > 1e-3);
        let missing = JumpProbe { step: 7, ..probe };
        assert!(matches!(velocity_jump(&model, &z, 0.3, &cond, &missing, 0.5), Err(Error::State(_))));
    }
}
