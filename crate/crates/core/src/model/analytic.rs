use ndarray::Axis;

use super::{Conditioning, InjectionHooks, VelocityField};
use crate::error::{Error, Result};
use crate::latent::Latent;

/// `v(z, t) = a·z + b`, with `b` broadcast over batch and tokens.
///
/// Solution from `t0`: `x(t) = e^{a(t−t0)} x(t0) + (b/a)(e^{a(t−t0)} − 1)`,
/// reducing to `x(t0) + b (t − t0)` when `a = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticLinearFlow {
    pub decay: f64,
    pub drift: Vec<f64>,
}

impl AnalyticLinearFlow {
    pub fn new(decay: f64, drift: Vec<f64>) -> Self {
        Self { decay, drift }
    }

    /// Pure decay `v = a·z` over `channels` channels.
    pub fn decay_only(decay: f64, channels: usize) -> Self {
        Self::new(decay, vec![0.0; channels])
    }

    fn check(&self, z: &Latent) -> Result<()> {
        if z.channels() != self.drift.len() {
            return Err(Error::Shape(format!(
                "flow has {} channels, latent has {}",
                self.drift.len(),
                z.channels()
            )));
        }
        Ok(())
    }

    /// Exact state at `t` starting from `z0` at `t0`.
    pub fn solution(&self, z0: &Latent, t0: f64, t: f64) -> Result<Latent> {
        self.check(z0)?;
        let dt = t - t0;
        let a = self.decay;
        let growth = (a * dt).exp();
        let mut out = z0.array().mapv(|x| x * growth);
        for mut lane in out.lanes_mut(Axis(2)) {
            for (x, b) in lane.iter_mut().zip(&self.drift) {
                *x += if a == 0.0 {
                    b * dt
                } else {
                    b / a * (growth - 1.0)
                };
            }
        }
        Latent::from_array(out)
    }
}

impl VelocityField for AnalyticLinearFlow {
    fn evaluate(
        &self,
        z: &Latent,
        _t: f64,
        _cond: &Conditioning,
        _hooks: Option<InjectionHooks<'_>>,
    ) -> Result<Latent> {
        self.check(z)?;
        let mut out = z.array().mapv(|x| self.decay * x);
        for mut lane in out.lanes_mut(Axis(2)) {
            for (x, b) in lane.iter_mut().zip(&self.drift) {
                *x += b;
            }
        }
        Ok(Latent::from_array_unchecked(out))
    }
}
