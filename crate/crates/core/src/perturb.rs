//! Latent perturbation toward random noise inside the edit region.
//!
//! The uniform Latents-Shift blends every channel of the inverted latent with
//! its AdaIN re-standardization toward `z_rand` at one strength `alpha`. The
//! channel-selective variant measures how far each channel's edit-region mean
//! sits from the noise mean, turns those gaps into softmax weights that
//! average to one, and scales the blend per channel.

use std::fmt::Write as _;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};
use crate::fmt::fmt_f64;
use crate::latent::{channel_mean_over, Latent, TokenSet, EPS_STD};

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    Uniform,
    ChannelSelective,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    pub alpha: f64,
    pub tau: f64,
    pub mode: PerturbationMode,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            mode: PerturbationMode::ChannelSelective,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit_interval("alpha", self.alpha)?;
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            name: "tau",
            value: tau,
            expected: "(0, inf)",
        })
    }
}

/// Per-channel perturbation weights, `C · softmax(d / τ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelWeights {
    pub alpha_c: Vec<f64>,
    pub tau: f64,
}

impl ChannelWeights {
    /// All-ones weights, as used by the uniform shift.
    pub fn uniform(channels: usize, tau: f64) -> Self {
        Self {
            alpha_c: vec![1.0; channels],
            tau,
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha_c.iter().sum::<f64>() / self.alpha_c.len() as f64
    }

    /// Population variance across channels.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.alpha_c.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / self.alpha_c.len() as f64
    }

    /// `min(alpha · alpha_c, 1)` per channel.
    pub fn blend_weights(&self, alpha: f64) -> Vec<f64> {
        self.alpha_c.iter().map(|a| (alpha * a).min(1.0)).collect()
    }
}

pub fn channel_weights(gaps: &[f64], tau: f64) -> Result<ChannelWeights> {
    check_tau(tau)?;
    if gaps.is_empty() {
        return Err(Error::Dimension("channel gap vector is empty".into()));
    }
    if gaps.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain {
            name: "d_c",
            value: f64::NAN,
            expected: "finite values",
        });
    }
    let max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = gaps.iter().map(|d| ((d - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let c = gaps.len() as f64;
    // (C·e)/sum keeps equal gaps at exactly 1
    let alpha_c = exps.iter().map(|e| c * e / sum).collect();
    Ok(ChannelWeights { alpha_c, tau })
}

/// `σ_y · (x − μ_x)/(σ_x + ε) + μ_y` for one channel of one batch element.
pub fn adain(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "adain operands have {} and {} tokens",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptySelection);
    }
    let (mx, sx) = mean_std(x);
    let (my, sy) = mean_std(y);
    Ok(x.iter().map(|v| sy * (v - mx) / (sx + EPS_STD) + my).collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `d_c = |mean_S z_inv[·,c] − mean_S z_rand[·,c]|`.
pub fn channel_gap(z_inv: &Latent, z_rand: &Latent, tokens: &TokenSet) -> Result<Vec<f64>> {
    z_inv.same_shape(z_rand)?;
    let a = channel_mean_over(z_inv, tokens)?;
    let b = channel_mean_over(z_rand, tokens)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect())
}

/// Batch-wide gap over every token; diagnostic only, the pipeline uses
/// [`channel_gap`] on the edit region.
pub fn channel_gap_global(z_inv: &Latent, z_rand: &Latent) -> Result<Vec<f64>> {
    channel_gap(z_inv, z_rand, &TokenSet::all(z_inv.tokens()))
}

fn blend_on_tokens(
    z_inv: &Latent,
    z_rand: &Latent,
    blend: &[f64],
    tokens: &TokenSet,
) -> Result<Latent> {
    z_inv.same_shape(z_rand)?;
    let (b, l, c) = z_inv.dims();
    tokens.validate(l)?;
    debug_assert_eq!(blend.len(), c);
    let mut out: Array3<f64> = z_inv.array().clone();
    for bi in 0..b {
        for (ci, &w) in blend.iter().enumerate() {
            let x: Vec<f64> = tokens.indices().iter().map(|&t| z_inv.get(bi, t, ci)).collect();
            let y: Vec<f64> = tokens.indices().iter().map(|&t| z_rand.get(bi, t, ci)).collect();
            let shifted = adain(&x, &y)?;
            for ((&t, s), xv) in tokens.indices().iter().zip(shifted).zip(x) {
                out[[bi, t, ci]] = w * s + (1.0 - w) * xv;
            }
        }
    }
    Latent::from_array(out)
}

/// Uniform Latents-Shift restricted to `tokens`. AdaIN statistics are taken
/// over the token subset only; tokens outside it are copied unchanged.
pub fn latents_shift_uniform(
    z_inv: &Latent,
    z_rand: &Latent,
    alpha: f64,
    tokens: &TokenSet,
) -> Result<Latent> {
    check_unit_interval("alpha", alpha)?;
    blend_on_tokens(z_inv, z_rand, &vec![alpha; z_inv.channels()], tokens)
}

/// Channel-selective shift. Returns the perturbed latent and the weights used.
pub fn latents_shift_channel_selective(
    z_inv: &Latent,
    z_rand: &Latent,
    cfg: &PerturbationConfig,
    tokens: &TokenSet,
) -> Result<(Latent, ChannelWeights)> {
    cfg.validate()?;
    let gaps = channel_gap(z_inv, z_rand, tokens)?;
    let weights = channel_weights(&gaps, cfg.tau)?;
    let z = blend_on_tokens(z_inv, z_rand, &weights.blend_weights(cfg.alpha), tokens)?;
    Ok((z, weights))
}

/// `channel,d_c,alpha_c,blend_weight` rows.
pub fn channel_report_csv(gaps: &[f64], weights: &ChannelWeights, alpha: f64) -> String {
    let mut s = String::from("channel,d_c,alpha_c,blend_weight\n");
    for (c, ((d, a), b)) in gaps
        .iter()
        .zip(&weights.alpha_c)
        .zip(weights.blend_weights(alpha))
        .enumerate()
    {
        let _ = writeln!(s, "{c},{},{},{}", fmt_f64(*d), fmt_f64(*a), fmt_f64(b));
    }
    s
}
