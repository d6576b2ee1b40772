use adaedit::model::{AnalyticLinearFlow, Conditioning};
use adaedit::pipeline::reconstruct_with;
use adaedit::solver::{
    convergence_order, integrate_backward, integrate_forward, order_study, NoHooks, SolverKind,
    TimeGrid,
};
use adaedit::Latent;
use proptest::prelude::*;

const LADDER: [usize; 3] = [10, 20, 40];

#[test]
fn fitted_orders() {
    let euler = order_study(SolverKind::Euler, &LADDER).unwrap();
    let mid = order_study(SolverKind::Midpoint, &LADDER).unwrap();
    let reuse = order_study(SolverKind::ReuseVelocity, &LADDER).unwrap();
    assert!((euler.order - 1.0).abs() < 0.3, "{}", euler.order);
    assert!((mid.order - 2.0).abs() < 0.3, "{}", mid.order);
    assert!((euler.errors[0] - 0.019_201_001_071).abs() < 1e-11);
    assert!((mid.errors[0] - 6.615_436_621e-4).abs() < 1e-12);
    assert_eq!(euler.evaluations, vec![10, 20, 40]);
    assert_eq!(mid.evaluations, vec![20, 40, 80]);
    assert_eq!(reuse.evaluations, vec![11, 21, 41]);
}

#[test]
fn reuse_error_sandwich_at_fifteen_steps() {
    let e = |k| order_study(k, &[15]).unwrap().errors[0];
    let (euler, reuse, mid) = (e(SolverKind::Euler), e(SolverKind::ReuseVelocity), e(SolverKind::Midpoint));
    assert!(euler > reuse && reuse > mid, "{euler} {reuse} {mid}");
    assert!((reuse - 6.800_226_366_642e-4).abs() < 1e-12);
}

/// Per-step amplification of the forward step times the backward step on
/// `v = a·z`: `(1 + x)(1 − x)` for Euler and
/// `(1 + x + x²/2)(1 − x + x²/2) = 1 + x⁴/4` for midpoint.
fn roundtrip_factor(kind: SolverKind, x: f64) -> f64 {
    match kind {
        SolverKind::Euler => (1.0 + x) * (1.0 - x),
        _ => (1.0 + x + 0.5 * x * x) * (1.0 - x + 0.5 * x * x),
    }
}

#[test]
fn analytic_reconstruction_matches_closed_form() {
    let a = -0.8;
    let flow = AnalyticLinearFlow::decay_only(a, 2);
    let src = Latent::from_fn(1, 4, 2, |(_, l, c)| 1.0 + 0.25 * l as f64 - 0.5 * c as f64).unwrap();
    // even terms survive the round trip: Euler keeps x², midpoint only x⁴
    for (kind, expected) in [(SolverKind::Euler, 1.0), (SolverKind::Midpoint, 3.0)] {
        let errs: Vec<f64> = LADDER
            .iter()
            .map(|&t| {
                let r = reconstruct_with(&flow, &src, &Conditioning::empty(), t, kind).unwrap();
                let gain = roundtrip_factor(kind, a / t as f64).powi(t as i32);
                let predicted = Latent::from_fn(1, 4, 2, |(b, l, c)| gain * src.get(b, l, c)).unwrap();
                assert!(r.max_abs_diff(&predicted).unwrap() < 1e-13);
                r.max_abs_diff(&src).unwrap()
            })
            .collect();
        let order = convergence_order(&LADDER, &errs);
        assert!((order - expected).abs() < 0.3, "{kind:?}: {order} {errs:?}");
    }
}

#[test]
fn backward_pass_matches_closed_form() {
    let flow = AnalyticLinearFlow::new(0.5, vec![1.0]);
    let z1 = Latent::from_vec(1, 1, 1, vec![2.0]).unwrap();
    let exact = flow.solution(&z1, 1.0, 0.0).unwrap().get(0, 0, 0);
    let grid = TimeGrid::uniform(40).unwrap();
    let tr = integrate_backward(&flow, &z1, &grid, SolverKind::Midpoint, &Conditioning::empty(), &mut NoHooks).unwrap();
    assert!((tr.last().get(0, 0, 0) - exact).abs() < 1e-4);
    assert_eq!(tr.states.len(), 41);
    assert_eq!(tr.times[0], 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluation_counts_hold(t in 1usize..30, kind in prop::sample::select(SolverKind::ALL.to_vec())) {
        let flow = AnalyticLinearFlow::decay_only(-0.3, 1);
        let z = Latent::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let grid = TimeGrid::uniform(t).unwrap();
        let fwd = integrate_forward(&flow, &z, &grid, kind, &Conditioning::empty(), &mut NoHooks).unwrap();
        let bwd = integrate_backward(&flow, &z, &grid, kind, &Conditioning::empty(), &mut NoHooks).unwrap();
        prop_assert_eq!(fwd.velocity_evals, kind.evaluations(t));
        prop_assert_eq!(bwd.velocity_evals, kind.evaluations(t));
    }

    #[test]
    fn zero_field_preserves_offsets(d in -5.0f64..5.0, t in 1usize..12) {
        let flow = AnalyticLinearFlow::new(0.0, vec![0.0]);
        let a = Latent::from_vec(1, 2, 1, vec![0.5, 0.5]).unwrap();
        let b = Latent::from_vec(1, 2, 1, vec![0.5, 0.5 + d]).unwrap();
        let grid = TimeGrid::uniform(t).unwrap();
        let ta = integrate_forward(&flow, &a, &grid, SolverKind::Euler, &Conditioning::empty(), &mut NoHooks).unwrap();
        let tb = integrate_forward(&flow, &b, &grid, SolverKind::Euler, &Conditioning::empty(), &mut NoHooks).unwrap();
        for s in adaedit::metrics::per_step_distances(&ta, &tb).unwrap() {
            prop_assert!((s - d.abs()).abs() < 1e-12);
        }
    }
}
