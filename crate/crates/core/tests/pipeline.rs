use adaedit::metrics::{per_step_distances, psnr, velocity_jump, JumpProbe};
use adaedit::model::{Conditioning, InjectionHooks, KvCache, ToyAttentionFlow, VelocityField};
use adaedit::pipeline::{
    run_ablation_grid, run_configured_edit, run_edit, run_reconstruction, Axis, EditConfig,
};
use adaedit::schedule::{InjectionSchedule, ScheduleFamily};
use adaedit::solver::{integrate_forward, NoHooks, SolverKind, TimeGrid};
use adaedit::Error;
use serde_json::json;

fn relative_max_error(a: &adaedit::Latent, b: &adaedit::Latent) -> f64 {
    a.max_abs_diff(b).unwrap() / b.max_abs()
}

#[test]
fn disabled_machinery_is_plain_sampling() {
    let cfg = EditConfig {
        alpha: 0.0,
        delta_base: 0.0,
        ..EditConfig::default()
    };
    let result = run_configured_edit(&cfg).unwrap();
    assert_eq!(result.perturbed_noise, result.inverted_noise);
    let model = ToyAttentionFlow::new(cfg.model.clone()).unwrap();
    let grid = TimeGrid::uniform(cfg.total_steps).unwrap();
    let plain = integrate_forward(
        &model,
        &result.inverted_noise,
        &grid,
        cfg.solver,
        &cfg.target_conditioning().unwrap(),
        &mut NoHooks,
    )
    .unwrap();
    assert_eq!(plain.last(), &result.edited);
}

#[test]
fn runs_are_deterministic() {
    let cfg = EditConfig::default();
    assert_eq!(run_configured_edit(&cfg).unwrap(), run_configured_edit(&cfg).unwrap());
    let src = cfg.source_latent().unwrap();
    let c = cfg.source_conditioning().unwrap();
    assert_eq!(
        run_reconstruction(&src, &c, &cfg).unwrap(),
        run_reconstruction(&src, &c, &cfg).unwrap()
    );
}

#[test]
fn result_invariants() {
    let cfg = EditConfig::default();
    let r = run_configured_edit(&cfg).unwrap();
    assert_eq!(r.schedule_trace.len(), cfg.total_steps);
    let s = InjectionSchedule::new(cfg.schedule_params()).unwrap();
    for e in &r.schedule_trace {
        assert_eq!(e.weight, s.weight(e.step).unwrap());
    }
    assert!((r.channel_weights.mean() - 1.0).abs() < 1e-9);
    assert_eq!(r.diagnostics.get("max_step_delta").unwrap(), s.max_step_delta(0.9).unwrap());
    assert_eq!(r.diagnostics.get("evals").unwrap(), 2.0 * 16.0);
    let ssim = r.diagnostics.get("ssim").unwrap();
    assert!((-1.0..=1.0).contains(&ssim));
    assert!(r.diagnostics.get("psnr").unwrap() >= 0.0);
}

#[test]
fn self_reconstruction_with_full_injection() {
    let cfg = EditConfig {
        schedule: ScheduleFamily::Binary,
        total_steps: 40,
        injection_steps: 40,
        delta_base: 1.0,
        alpha: 0.0,
        solver: SolverKind::Midpoint,
        global_mix: true,
        target_prompt: EditConfig::default().source_prompt,
        ..EditConfig::default()
    };
    let r = run_configured_edit(&cfg).unwrap();
    let err = relative_max_error(&r.edited, &cfg.source_latent().unwrap());
    assert!(err < 0.05, "relative max error {err}");
}

#[test]
fn reconstruction_improves_with_steps() {
    let base = EditConfig {
        solver: SolverKind::Euler,
        ..EditConfig::default()
    };
    let src = base.source_latent().unwrap();
    let c = base.source_conditioning().unwrap();
    let peak = adaedit::metrics::default_peak(&src);
    let ladder: Vec<f64> = [5, 15, 45]
        .iter()
        .map(|&t| {
            let cfg = EditConfig { total_steps: t, ..base.clone() };
            psnr(&src, &run_reconstruction(&src, &c, &cfg).unwrap(), peak).unwrap()
        })
        .collect();
    assert!(ladder[0] < ladder[1] && ladder[1] < ladder[2], "{ladder:?}");
}

#[test]
fn injection_window_never_misses() {
    let families = ScheduleFamily::ALL;
    let solvers = SolverKind::ALL;
    for i in 0..10usize {
        let t = 4 + i;
        let cfg = EditConfig {
            seed: i as u64,
            total_steps: t,
            injection_steps: 1 + (i * 7) % t,
            schedule: families[i % 4],
            solver: solvers[i % 3],
            delta_base: 0.1 * i as f64,
            layer_ratio_beta: 0.3 * (i % 3) as f64,
            global_mix: i % 2 == 0,
            ..EditConfig::default()
        };
        let r = run_configured_edit(&cfg);
        assert!(r.is_ok(), "config {i}: {r:?}");
    }
}

#[test]
fn stronger_anchoring_stays_closer_to_reconstruction() {
    let dists: Vec<f64> = [0.0, 0.45, 0.9]
        .iter()
        .map(|&d| {
            let r = run_configured_edit(&EditConfig { delta_base: d, ..EditConfig::default() }).unwrap();
            r.edited.l2_distance(r.reconstructed_source.as_ref().unwrap()).unwrap()
        })
        .collect();
    assert!(dists[0] >= dists[1] && dists[1] >= dists[2], "{dists:?}");
}

fn cutoff_vs_sigmoid(seed: u64) -> (f64, f64) {
    let base = EditConfig { seed, source_seed: seed + 100, ..EditConfig::default() };
    let binary = run_configured_edit(&EditConfig { schedule: ScheduleFamily::Binary, ..base.clone() }).unwrap();
    let sigmoid = run_configured_edit(&base).unwrap();
    (
        binary.diagnostics.get("cutoff_velocity_jump").unwrap(),
        sigmoid.diagnostics.get("velocity_jump").unwrap(),
    )
}

#[test]
fn binary_cutoff_jump_exceeds_sigmoid_steps() {
    for seed in 0..5 {
        let (cutoff, smooth) = cutoff_vs_sigmoid(seed);
        assert!(cutoff > smooth, "seed {seed}: {cutoff} vs {smooth}");
    }
}

#[test]
fn cutoff_jump_equals_direct_evaluation() {
    // repeat the inversion with a probe cache and evaluate the jump by hand
    let cfg = EditConfig { schedule: ScheduleFamily::Binary, ..EditConfig::default() };
    let r = run_configured_edit(&cfg).unwrap();
    let model = ToyAttentionFlow::new(cfg.model.clone()).unwrap();
    let grid = TimeGrid::uniform(cfg.total_steps).unwrap();
    let src = cfg.source_latent().unwrap();
    let c_src = cfg.source_conditioning().unwrap();
    let c_tgt = cfg.target_conditioning().unwrap();
    struct Probe<'a>(&'a mut KvCache);
    impl adaedit::solver::HookPlan for Probe<'_> {
        fn hooks(&mut self, site: adaedit::solver::EvalSite) -> adaedit::Result<Option<InjectionHooks<'_>>> {
            Ok(site
                .first_in_step
                .then(|| InjectionHooks::off(site.step).with_probe(&mut *self.0)))
        }
    }
    let mut cache = KvCache::new();
    adaedit::solver::integrate_backward(&model, &src, &grid, cfg.solver, &c_src, &mut Probe(&mut cache)).unwrap();
    let i = cfg.injection_steps;
    let probe = JumpProbe { cache: &cache, step: i, mask: Some(&r.mask), global_mix: false };
    let direct = velocity_jump(&model, &r.sampling.states[i], grid.t(i), &c_tgt, &probe, 0.9).unwrap();
    assert_eq!(direct, r.diagnostics.get("cutoff_velocity_jump").unwrap());
    // and by two explicit model calls
    let x = &r.sampling.states[i];
    let on = model
        .evaluate(
            x,
            grid.t(i),
            &c_tgt,
            Some(InjectionHooks::inject(
                i,
                adaedit::model::Injection {
                    cache: &cache,
                    mix_ratios: vec![0.9; model.layer_count()],
                    background_mask: Some(&r.mask),
                    global_mix: false,
                },
            )),
        )
        .unwrap();
    let off = model.evaluate(x, grid.t(i), &c_tgt, None).unwrap();
    assert_eq!(on.l2_distance(&off).unwrap(), direct);
}

#[test]
fn binary_deviation_appears_after_cutoff() {
    let base = EditConfig::default();
    let binary = run_configured_edit(&EditConfig { schedule: ScheduleFamily::Binary, ..base.clone() }).unwrap();
    let sigmoid = run_configured_edit(&base).unwrap();
    let d = per_step_distances(&binary.sampling, &sigmoid.sampling).unwrap();
    let argmax = d
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0;
    assert!(argmax >= base.injection_steps, "{d:?}");
}

#[test]
fn grid_rows() {
    let cfg = EditConfig::default();
    let src = cfg.source_latent().unwrap();
    let (cs, ct) = (cfg.source_conditioning().unwrap(), cfg.target_conditioning().unwrap());
    let rows = run_ablation_grid(&src, &cs, &ct, &cfg, &[Axis::new("schedule", vec![json!("binary"), json!("sigmoid")])]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].summary.max_step_delta, 0.9);
    assert!(rows[1].summary.max_step_delta < 0.9);

    let rows = run_ablation_grid(&src, &cs, &ct, &cfg, &[Axis::new("tau", vec![json!(0.25), json!(1.0), json!(4.0)])]).unwrap();
    let var: Vec<f64> = rows.iter().map(|r| r.result.channel_weights.variance()).collect();
    assert!(var.windows(2).all(|w| w[1] <= w[0]), "{var:?}");
    assert!(rows.iter().enumerate().all(|(i, r)| r.summary.run_id == i));

    assert_eq!(run_ablation_grid(&src, &cs, &ct, &cfg, &[]).unwrap().len(), 1);
    let bad = run_ablation_grid(&src, &cs, &ct, &cfg, &[Axis::new("temperature", vec![json!(1.0)])]);
    assert!(matches!(bad, Err(Error::Config { .. })));
}

#[test]
fn source_shape_is_checked() {
    let cfg = EditConfig::default();
    let wrong = adaedit::Latent::zeros(1, 9, 8).unwrap();
    let c = cfg.source_conditioning().unwrap();
    assert!(matches!(run_edit(&wrong, &c, &c, &cfg), Err(Error::Shape(_))));
}

#[test]
fn velocity_jump_zero_delta() {
    let cfg = EditConfig::default();
    let model = ToyAttentionFlow::new(cfg.model.clone()).unwrap();
    let z = cfg.source_latent().unwrap();
    let c: Conditioning = cfg.source_conditioning().unwrap();
    let mut cache = KvCache::new();
    model.evaluate(&z, 0.5, &c, Some(InjectionHooks::record(3, &mut cache))).unwrap();
    let probe = JumpProbe { cache: &cache, step: 3, mask: None, global_mix: true };
    for t in [0.0, 0.2, 0.9] {
        assert_eq!(velocity_jump(&model, &z, t, &c, &probe, 0.0).unwrap(), 0.0);
    }
}
