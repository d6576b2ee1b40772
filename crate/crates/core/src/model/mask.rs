use std::fmt::Write as _;

use super::AttentionRecord;
use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::latent::TokenSet;

/// Soft per-token edit weights plus the binarized edit set `{soft ≥ 0.5}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    pub soft: Vec<f64>,
    pub hard: TokenSet,
}

impl EditMask {
    pub fn from_soft(soft: Vec<f64>) -> Self {
        let hard = soft
            .iter()
            .enumerate()
            .filter(|(_, &s)| s >= 0.5)
            .map(|(i, _)| i)
            .collect();
        Self { soft, hard }
    }

    pub fn len(&self) -> usize {
        self.soft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soft.is_empty()
    }

    /// `token,soft,hard` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("token,soft,hard\n");
        for (i, v) in self.soft.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", fmt_f64(*v), u8::from(self.hard.contains(i)));
        }
        s
    }
}

/// Mask from the keyword's averaged attention map.
///
/// The map is min-max normalized to `[0, 1]` (a constant map becomes all
/// zeros), thresholded at its mean `τ_A`, and relaxed as `σ(γ (A − τ_A))`.
/// Without `gamma` the hard limit is used: 1 above the mean, 0 below, and
/// 0.5 exactly at it.
pub fn extract_mask(record: &AttentionRecord, keyword: usize, gamma: Option<f64>) -> Result<EditMask> {
    if let Some(g) = gamma {
        if g.is_nan() || g <= 0.0 {
            return Err(Error::Domain {
                name: "soft_mask_gamma",
                value: g,
                expected: "(0, inf)",
            });
        }
    }
    let raw = record.keyword_map(keyword)?;
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    let span = hi - lo;
    let a: Vec<f64> = raw
        .iter()
        .map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 })
        .collect();
    let threshold = a.iter().sum::<f64>() / a.len() as f64;
    let soft = a
        .iter()
        .map(|&x| {
            let centered = x - threshold;
            match gamma {
                Some(g) => 1.0 / (1.0 + (-g * centered).exp()),
                None if centered > 0.0 => 1.0,
                None if centered < 0.0 => 0.0,
                None => 0.5,
            }
        })
        .collect();
    Ok(EditMask::from_soft(soft))
}
