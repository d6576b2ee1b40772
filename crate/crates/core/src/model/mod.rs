//! Velocity fields standing in for a flow-matching backbone.
//!
//! [`AnalyticLinearFlow`] has a closed-form solution and is used to verify the
//! solvers. [`ToyAttentionFlow`] is a small seeded attention network whose
//! per-layer keys and values can be recorded, injected and mixed through
//! [`InjectionHooks`].

mod analytic;
mod kv;
mod mask;
mod toy;

pub use analytic::AnalyticLinearFlow;
pub use kv::{kv_mix, AttentionRecord, KvCache, KvEntry};
pub use mask::{extract_mask, EditMask};
pub use toy::{ToyAttentionFlow, ToyConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

/// Text conditioning: prompt token ids plus the position of the edited word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub prompt_token_ids: Vec<usize>,
    pub keyword_index: usize,
}

impl Conditioning {
    pub fn new(prompt_token_ids: Vec<usize>, keyword_index: usize) -> Result<Self> {
        if keyword_index >= prompt_token_ids.len() {
            return Err(Error::Index {
                index: keyword_index,
                len: prompt_token_ids.len(),
            });
        }
        Ok(Self {
            prompt_token_ids,
            keyword_index,
        })
    }

    /// Conditioning with no tokens, for fields that ignore it.
    pub fn empty() -> Self {
        Self {
            prompt_token_ids: Vec::new(),
            keyword_index: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookMode {
    Off,
    Record,
    Inject,
}

/// Read side of an injection: cached source K/V blended into the current pass.
#[derive(Debug, Clone)]
pub struct Injection<'a> {
    pub cache: &'a KvCache,
    /// One ratio per layer, each in `[0, 1]`.
    pub mix_ratios: Vec<f64>,
    pub background_mask: Option<&'a EditMask>,
    pub global_mix: bool,
}

/// Per-evaluation hooks into the attention layers.
///
/// In record mode each layer's K/V is stored under `(step, layer)`; a probe
/// cache, when given, receives a second copy. In inject mode K/V are replaced
/// by [`kv_mix`] of the cached source and the current target before attention.
#[derive(Debug)]
pub struct InjectionHooks<'a> {
    pub step: usize,
    pub record: Option<&'a mut KvCache>,
    pub probe: Option<&'a mut KvCache>,
    pub inject: Option<Injection<'a>>,
    pub attention: Option<&'a mut AttentionRecord>,
}

impl<'a> InjectionHooks<'a> {
    pub fn off(step: usize) -> Self {
        Self {
            step,
            record: None,
            probe: None,
            inject: None,
            attention: None,
        }
    }

    pub fn record(step: usize, cache: &'a mut KvCache) -> Self {
        Self {
            record: Some(cache),
            ..Self::off(step)
        }
    }

    pub fn inject(step: usize, injection: Injection<'a>) -> Self {
        Self {
            inject: Some(injection),
            ..Self::off(step)
        }
    }

    pub fn with_probe(mut self, probe: &'a mut KvCache) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn with_attention(mut self, record: &'a mut AttentionRecord) -> Self {
        self.attention = Some(record);
        self
    }

    pub fn mode(&self) -> HookMode {
        if self.inject.is_some() {
            HookMode::Inject
        } else if self.record.is_some() || self.probe.is_some() {
            HookMode::Record
        } else {
            HookMode::Off
        }
    }
}

/// A velocity field `v(z, t; cond)` over latents.
pub trait VelocityField {
    fn evaluate(
        &self,
        z: &Latent,
        t: f64,
        cond: &Conditioning,
        hooks: Option<InjectionHooks<'_>>,
    ) -> Result<Latent>;

    /// Number of attention layers exposing K/V (zero for fields without any).
    fn layer_count(&self) -> usize {
        0
    }
}

impl<V: VelocityField + ?Sized> VelocityField for &V {
    fn evaluate(
        &self,
        z: &Latent,
        t: f64,
        cond: &Conditioning,
        hooks: Option<InjectionHooks<'_>>,
    ) -> Result<Latent> {
        (**self).evaluate(z, t, cond, hooks)
    }

    fn layer_count(&self) -> usize {
        (**self).layer_count()
    }
}
