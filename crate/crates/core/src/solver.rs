//! Fixed-grid integration of `dz/dt = v(z, t)` forward (sampling, `0 → 1`)
//! and backward (inversion, `1 → 0`).
//!
//! Three schemes are provided:
//!
//! - **Euler**: one evaluation per step.
//! - **Midpoint** (RF-Solver style): `z + h·v(z + h/2·v(z, t), t + h/2)`,
//!   two evaluations per step.
//! - **Reuse velocity** (FireFlow style): the midpoint scheme, except the
//!   first-stage velocity of step `i + 1` is the midpoint velocity of step
//!   `i`. Step 0 costs two evaluations and every later step one.
//!
//! Step `i` always refers to the grid interval `[t_i, t_{i+1}]`, in both
//! directions, so features cached at inversion step `i` are the ones the
//! sampling pass consumes at step `i`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Phase, Result};
use crate::fmt::fmt_f64;
use crate::latent::Latent;
use crate::model::{Conditioning, InjectionHooks, VelocityField};

/// States whose L2 norm exceeds this abort the integration.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Euler,
    Midpoint,
    ReuseVelocity,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Euler, SolverKind::Midpoint, SolverKind::ReuseVelocity];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Midpoint => "midpoint",
            SolverKind::ReuseVelocity => "reuse_velocity",
        }
    }

    /// Model evaluations for a `steps`-step trajectory.
    pub fn evaluations(self, steps: usize) -> usize {
        match self {
            SolverKind::Euler => steps,
            SolverKind::Midpoint => 2 * steps,
            SolverKind::ReuseVelocity => steps + usize::from(steps > 0),
        }
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "midpoint" => Ok(Self::Midpoint),
            "reuse_velocity" => Ok(Self::ReuseVelocity),
            other => Err(Error::Parse(format!("unknown solver `{other}`"))),
        }
    }
}

/// Strictly increasing times from exactly 0 to exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        let times = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(Error::Dimension(
                "time grid needs at least two points, starting at 0 and ending at 1".into(),
            ));
        }
        if times.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Dimension("time grid must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn width(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }
}

/// Sampling step whose interval inversion step `inversion_step` traverses.
pub fn step_index_map(grid: &TimeGrid, inversion_step: usize) -> Result<usize> {
    if inversion_step >= grid.steps() {
        return Err(Error::Index {
            index: inversion_step,
            len: grid.steps(),
        });
    }
    Ok(inversion_step)
}

/// Visited states in integration order, with their times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Latent>,
    pub velocity_evals: usize,
}

impl Trajectory {
    pub fn last(&self) -> &Latent {
        self.states.last().expect("trajectories are never empty")
    }

    pub fn first(&self) -> &Latent {
        &self.states[0]
    }

    /// `step,t,norm,eval_count` rows; `eval_count` is cumulative.
    pub fn to_csv(&self, kind: SolverKind) -> String {
        let mut s = String::from("step,t,norm,eval_count\n");
        for (i, (t, z)) in self.times.iter().zip(&self.states).enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{}",
                fmt_f64(*t),
                fmt_f64(z.l2_norm()),
                kind.evaluations(i)
            );
        }
        s
    }
}

/// Where inside a trajectory a model evaluation happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSite {
    pub step: usize,
    /// True for the first evaluation actually performed within the step.
    pub first_in_step: bool,
}

/// Supplies hooks for each model evaluation of a trajectory.
pub trait HookPlan {
    fn hooks(&mut self, site: EvalSite) -> Result<Option<InjectionHooks<'_>>>;
}

/// No hooks at any evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl HookPlan for NoHooks {
    fn hooks(&mut self, _site: EvalSite) -> Result<Option<InjectionHooks<'_>>> {
        Ok(None)
    }
}

struct Integrator<'a, V: VelocityField + ?Sized, P: HookPlan + ?Sized> {
    field: &'a V,
    cond: &'a Conditioning,
    plan: &'a mut P,
    evals: usize,
}

impl<V: VelocityField + ?Sized, P: HookPlan + ?Sized> Integrator<'_, V, P> {
    fn eval(&mut self, z: &Latent, t: f64, site: EvalSite) -> Result<Latent> {
        self.evals += 1;
        let hooks = self.plan.hooks(site)?;
        self.field.evaluate(z, t, self.cond, hooks)
    }

    /// One step from `(z, t)` with signed width `dt`. `carried` holds the
    /// reusable velocity for the reuse scheme and is updated in place.
    fn step(
        &mut self,
        kind: SolverKind,
        z: &Latent,
        t: f64,
        dt: f64,
        step: usize,
        carried: &mut Option<Latent>,
    ) -> Result<Latent> {
        let first = EvalSite { step, first_in_step: true };
        let second = EvalSite { step, first_in_step: false };
        match kind {
            SolverKind::Euler => {
                let v = self.eval(z, t, first)?;
                Ok(z.axpy(dt, &v))
            }
            SolverKind::Midpoint => {
                let v1 = self.eval(z, t, first)?;
                let zm = z.axpy(0.5 * dt, &v1);
                let v2 = self.eval(&zm, t + 0.5 * dt, second)?;
                Ok(z.axpy(dt, &v2))
            }
            SolverKind::ReuseVelocity => {
                let (v1, mid_site) = match carried.take() {
                    Some(v) => (v, first),
                    None => (self.eval(z, t, first)?, second),
                };
                let zm = z.axpy(0.5 * dt, &v1);
                let v2 = self.eval(&zm, t + 0.5 * dt, mid_site)?;
                let next = z.axpy(dt, &v2);
                *carried = Some(v2);
                Ok(next)
            }
        }
    }
}

fn check_state(z: &Latent, step: usize, phase: Phase) -> Result<()> {
    if !z.is_finite() {
        return Err(Error::Divergence {
            phase,
            step,
            reason: "non-finite state".into(),
        });
    }
    let norm = z.l2_norm();
    if norm > DIVERGENCE_NORM {
        return Err(Error::Divergence {
            phase,
            step,
            reason: format!("state norm {norm:.3e} exceeds {DIVERGENCE_NORM:e}"),
        });
    }
    Ok(())
}

/// Sampling direction: `t = 0 → 1`, steps `0..T`.
pub fn integrate_forward<V, P>(
    field: &V,
    z0: &Latent,
    grid: &TimeGrid,
    kind: SolverKind,
    cond: &Conditioning,
    plan: &mut P,
) -> Result<Trajectory>
where
    V: VelocityField + ?Sized,
    P: HookPlan + ?Sized,
{
    check_state(z0, 0, Phase::Sampling)?;
    let mut it = Integrator { field, cond, plan, evals: 0 };
    let mut states = vec![z0.clone()];
    let mut carried = None;
    for i in 0..grid.steps() {
        let z = states.last().unwrap();
        let next = it.step(kind, z, grid.t(i), grid.width(i), i, &mut carried)?;
        check_state(&next, i, Phase::Sampling)?;
        states.push(next);
    }
    Ok(Trajectory {
        times: grid.times().to_vec(),
        states,
        velocity_evals: it.evals,
    })
}

/// Inversion direction: `t = 1 → 0`, steps `T−1` down to `0`. States are
/// stored in visiting order, so `states[0]` is the input at `t = 1`.
pub fn integrate_backward<V, P>(
    field: &V,
    z1: &Latent,
    grid: &TimeGrid,
    kind: SolverKind,
    cond: &Conditioning,
    plan: &mut P,
) -> Result<Trajectory>
where
    V: VelocityField + ?Sized,
    P: HookPlan + ?Sized,
{
    check_state(z1, grid.steps().saturating_sub(1), Phase::Inversion)?;
    let mut it = Integrator { field, cond, plan, evals: 0 };
    let mut states = vec![z1.clone()];
    let mut carried = None;
    for i in (0..grid.steps()).rev() {
        let step = step_index_map(grid, i)?;
        let z = states.last().unwrap();
        let next = it.step(kind, z, grid.t(i + 1), -grid.width(i), step, &mut carried)?;
        check_state(&next, i, Phase::Inversion)?;
        states.push(next);
    }
    Ok(Trajectory {
        times: grid.times().iter().rev().copied().collect(),
        states,
        velocity_evals: it.evals,
    })
}

/// Least-squares slope of `log(error)` against `log(1/T)`.
pub fn convergence_order(steps: &[usize], errors: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .zip(errors)
        .map(|(&n, &e)| ((1.0 / n as f64).ln(), e.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Global endpoint errors of one scheme over a ladder of step counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderStudy {
    pub kind: SolverKind,
    pub steps: Vec<usize>,
    pub errors: Vec<f64>,
    pub evaluations: Vec<usize>,
    pub order: f64,
}

/// Integrate `v = −z` from `z(0) = 1` to `t = 1` and compare with `e^{−1}`.
pub fn order_study(kind: SolverKind, steps: &[usize]) -> Result<OrderStudy> {
    let field = crate::model::AnalyticLinearFlow::decay_only(-1.0, 1);
    let z0 = Latent::from_vec(1, 1, 1, vec![1.0])?;
    let exact = (-1f64).exp();
    let mut errors = Vec::with_capacity(steps.len());
    let mut evaluations = Vec::with_capacity(steps.len());
    for &n in steps {
        let grid = TimeGrid::uniform(n)?;
        let tr = integrate_forward(&field, &z0, &grid, kind, &Conditioning::empty(), &mut NoHooks)?;
        errors.push((tr.last().get(0, 0, 0) - exact).abs());
        evaluations.push(tr.velocity_evals);
    }
    Ok(OrderStudy {
        kind,
        steps: steps.to_vec(),
        order: convergence_order(steps, &errors),
        errors,
        evaluations,
    })
}

/// `solver,T,error,evals,order` rows, the fitted order repeated per row.
pub fn orders_csv(studies: &[OrderStudy]) -> String {
    let mut s = String::from("solver,T,error,evals,order\n");
    for st in studies {
        for ((n, e), ev) in st.steps.iter().zip(&st.errors).zip(&st.evaluations) {
            let _ = writeln!(s, "{},{n},{},{ev},{}", st.kind.name(), fmt_f64(*e), fmt_f64(st.order));
        }
    }
    s
}
