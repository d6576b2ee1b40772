//! Injection weight schedules over the sampling trajectory.
//!
//! A schedule maps a sampling-step index `i ∈ [0, T)` to a weight `w_i ∈ [0, 1]`
//! that scales the base KV-mix ratio. The binary family reproduces the hard
//! cutoff used by earlier inversion-based editors; the sigmoid, cosine and
//! linear families decay smoothly instead. Weights are computed once at
//! construction and looked up afterwards.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};
use crate::fmt::fmt_f64;

pub const DEFAULT_SHARPNESS: f64 = 5.0;
pub const DEFAULT_MIDPOINT: f64 = 0.7;
pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 0.05;
pub const DEFAULT_LAYER_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    Sigmoid,
    Cosine,
    Linear,
    Binary,
}

impl ScheduleFamily {
    pub const ALL: [ScheduleFamily; 4] = [
        ScheduleFamily::Binary,
        ScheduleFamily::Sigmoid,
        ScheduleFamily::Cosine,
        ScheduleFamily::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleFamily::Sigmoid => "sigmoid",
            ScheduleFamily::Cosine => "cosine",
            ScheduleFamily::Linear => "linear",
            ScheduleFamily::Binary => "binary",
        }
    }
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            "binary" => Ok(Self::Binary),
            other => Err(Error::Parse(format!("unknown schedule family `{other}`"))),
        }
    }
}

/// Unvalidated schedule parameters; see [`InjectionSchedule::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub family: ScheduleFamily,
    pub total_steps: usize,
    pub injection_steps: usize,
    pub sharpness: f64,
    pub midpoint: f64,
    pub activity_threshold: f64,
}

impl ScheduleParams {
    pub fn new(family: ScheduleFamily, total_steps: usize, injection_steps: usize) -> Self {
        Self {
            family,
            total_steps,
            injection_steps,
            sharpness: DEFAULT_SHARPNESS,
            midpoint: DEFAULT_MIDPOINT,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
        }
    }

    pub fn with_sigmoid(mut self, sharpness: f64, midpoint: f64) -> Self {
        self.sharpness = sharpness;
        self.midpoint = midpoint;
        self
    }

    pub fn build(self) -> Result<InjectionSchedule> {
        InjectionSchedule::new(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSchedule {
    params: ScheduleParams,
    weights: Vec<f64>,
}

impl InjectionSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            family,
            total_steps,
            injection_steps,
            sharpness,
            midpoint,
            activity_threshold,
        } = params;
        if total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        if injection_steps == 0 || injection_steps > total_steps {
            return Err(Error::config(
                "injection_steps",
                format!("must be in [1, total_steps = {total_steps}], got {injection_steps}"),
            ));
        }
        if family == ScheduleFamily::Sigmoid {
            if !(sharpness > 0.0 && sharpness.is_finite()) {
                return Err(Error::config("sharpness", "must be positive and finite"));
            }
            if !(midpoint > 0.0 && midpoint < 1.0) {
                return Err(Error::config("midpoint", "must lie in (0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&activity_threshold) {
            return Err(Error::config("activity_threshold", "must lie in [0, 1)"));
        }
        let weights = (0..total_steps)
            .map(|i| raw_weight(&params, i))
            .collect();
        Ok(Self { params, weights })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn family(&self) -> ScheduleFamily {
        self.params.family
    }

    pub fn total_steps(&self) -> usize {
        self.params.total_steps
    }

    pub fn injection_steps(&self) -> usize {
        self.params.injection_steps
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, step: usize) -> Result<f64> {
        self.weights.get(step).copied().ok_or(Error::Index {
            index: step,
            len: self.weights.len(),
        })
    }

    /// Whether injection happens at `step`. The binary family ignores the
    /// activity threshold.
    pub fn is_active(&self, step: usize) -> Result<bool> {
        let w = self.weight(step)?;
        Ok(match self.params.family {
            ScheduleFamily::Binary => step < self.params.injection_steps,
            _ => w > self.params.activity_threshold,
        })
    }

    pub fn active_steps(&self) -> Vec<usize> {
        (0..self.weights.len())
            .filter(|&i| self.is_active(i).unwrap_or(false))
            .collect()
    }

    /// `delta_base · w_step`.
    pub fn effective_ratio(&self, delta_base: f64, step: usize) -> Result<f64> {
        check_unit_interval("delta_base", delta_base)?;
        Ok(delta_base * self.weight(step)?)
    }

    /// Effective ratio that is actually applied: zero on inactive steps.
    pub fn applied_ratio(&self, delta_base: f64, step: usize) -> Result<f64> {
        if self.is_active(step)? {
            self.effective_ratio(delta_base, step)
        } else {
            check_unit_interval("delta_base", delta_base)?;
            Ok(0.0)
        }
    }

    /// Largest change of the applied ratio between consecutive steps.
    pub fn max_step_delta(&self, delta_base: f64) -> Result<f64> {
        let applied = (0..self.weights.len())
            .map(|i| self.applied_ratio(delta_base, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(applied
            .windows(2)
            .fold(0.0, |m, w| m.max((w[1] - w[0]).abs())))
    }

    /// `step,weight,active` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,weight,active\n");
        for (i, w) in self.weights.iter().enumerate() {
            let active = self.is_active(i).unwrap_or(false);
            let _ = writeln!(s, "{i},{},{}", fmt_f64(*w), u8::from(active));
        }
        s
    }
}

fn raw_weight(p: &ScheduleParams, step: usize) -> f64 {
    let ratio = step as f64 / p.injection_steps as f64;
    match p.family {
        ScheduleFamily::Sigmoid => 1.0 / (1.0 + (p.sharpness * (ratio - p.midpoint)).exp()),
        ScheduleFamily::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * ratio.min(1.0)).cos()),
        ScheduleFamily::Linear => (1.0 - ratio).max(0.0),
        ScheduleFamily::Binary => {
            if step < p.injection_steps {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Depth-dependent multiplier on the mixing ratio:
/// `1 + slope · (l / (layers − 1) − 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRatioProfile {
    layer_count: usize,
    slope: f64,
}

impl LayerRatioProfile {
    pub fn new(layer_count: usize, slope: f64) -> Result<Self> {
        if layer_count == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        // the smallest multiplier is 1 - slope/2, which must stay positive
        if !(0.0..2.0).contains(&slope) {
            return Err(Error::config("layer_ratio_beta", "must lie in [0, 2)"));
        }
        Ok(Self { layer_count, slope })
    }

    pub fn flat(layer_count: usize) -> Self {
        Self {
            layer_count: layer_count.max(1),
            slope: 0.0,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn multiplier(&self, layer: usize) -> Result<f64> {
        if layer >= self.layer_count {
            return Err(Error::Index {
                index: layer,
                len: self.layer_count,
            });
        }
        if self.layer_count == 1 {
            return Ok(1.0);
        }
        let depth = layer as f64 / (self.layer_count - 1) as f64;
        Ok(1.0 + self.slope * (depth - 0.5))
    }

    /// `clamp(effective · multiplier(l), 0, 1)` for every layer.
    pub fn layer_ratios(&self, effective: f64) -> Vec<f64> {
        (0..self.layer_count)
            .map(|l| (effective * self.multiplier(l).expect("in range")).clamp(0.0, 1.0))
            .collect()
    }
}
