//! The three-phase edit: inversion with feature caching and mask extraction,
//! channel-selective perturbation of the inverted noise, then sampling with
//! progressive K/V injection.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::latent::{sample_gaussian, synthetic_source, Latent, SeededRng, TokenSet};
use crate::metrics::{
    default_peak, psnr, ssim, velocity_change, JumpProbe, MetricReport, SsimParams,
};
use crate::model::{
    extract_mask, AttentionRecord, Conditioning, EditMask, Injection, InjectionHooks, KvCache,
    ToyAttentionFlow, ToyConfig, VelocityField,
};
use crate::perturb::{
    channel_gap, channel_weights, latents_shift_channel_selective, latents_shift_uniform,
    ChannelWeights, PerturbationConfig, PerturbationMode, DEFAULT_ALPHA, DEFAULT_TAU,
};
use crate::schedule::{
    InjectionSchedule, LayerRatioProfile, ScheduleFamily, ScheduleParams,
    DEFAULT_ACTIVITY_THRESHOLD, DEFAULT_MIDPOINT, DEFAULT_SHARPNESS,
};
use crate::solver::{
    integrate_backward, integrate_forward, EvalSite, HookPlan, NoHooks, SolverKind, TimeGrid,
    Trajectory,
};

/// Header of the one-row-per-run summary table.
pub const SUMMARY_HEADER: &str =
    "run_id,schedule,T,T_inj,delta_base,alpha,tau,solver,psnr,ssim,max_step_delta,velocity_jump,evals";

/// Which prompt's keyword locates the edit region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKeyword {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Seeds the random latent of the perturbation step.
    pub seed: u64,
    /// Seeds the synthetic source latent used by the command-line driver.
    pub source_seed: u64,
    pub total_steps: usize,
    pub injection_steps: usize,
    pub schedule: ScheduleFamily,
    pub sharpness: f64,
    pub midpoint: f64,
    pub activity_threshold: f64,
    pub delta_base: f64,
    pub alpha: f64,
    pub tau: f64,
    pub solver: SolverKind,
    pub perturbation: PerturbationMode,
    pub soft_mask_gamma: Option<f64>,
    pub layer_ratio_beta: f64,
    /// Inject into every image token instead of the background only.
    pub global_mix: bool,
    pub mask_keyword: MaskKeyword,
    pub source_prompt: Vec<usize>,
    pub source_keyword: usize,
    pub target_prompt: Vec<usize>,
    pub target_keyword: usize,
    pub model: ToyConfig,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source_seed: 1,
            total_steps: 15,
            injection_steps: 4,
            schedule: ScheduleFamily::Sigmoid,
            sharpness: DEFAULT_SHARPNESS,
            midpoint: DEFAULT_MIDPOINT,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
            delta_base: 0.9,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            solver: SolverKind::ReuseVelocity,
            perturbation: PerturbationMode::ChannelSelective,
            soft_mask_gamma: None,
            layer_ratio_beta: 0.0,
            global_mix: false,
            mask_keyword: MaskKeyword::Target,
            source_prompt: vec![1, 2, 3, 4],
            source_keyword: 2,
            target_prompt: vec![1, 2, 5, 4],
            target_keyword: 2,
            model: ToyConfig::default(),
        }
    }
}

fn unit(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, format!("must lie in [0, 1], got {v}")))
    }
}

impl EditConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with one field replaced; `path` may be dotted (`model.seed`).
    pub fn with_field(&self, path: &str, value: Value) -> Result<Self> {
        let mut root = self.to_value();
        set_path(&mut root, path, value)?;
        Self::from_value(root)
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            activity_threshold: self.activity_threshold,
            ..ScheduleParams::new(self.schedule, self.total_steps, self.injection_steps)
                .with_sigmoid(self.sharpness, self.midpoint)
        }
    }

    pub fn perturbation_config(&self) -> PerturbationConfig {
        PerturbationConfig {
            alpha: self.alpha,
            tau: self.tau,
            mode: self.perturbation,
        }
    }

    pub fn source_conditioning(&self) -> Result<Conditioning> {
        Conditioning::new(self.source_prompt.clone(), self.source_keyword)
    }

    pub fn target_conditioning(&self) -> Result<Conditioning> {
        Conditioning::new(self.target_prompt.clone(), self.target_keyword)
    }

    /// The seeded synthetic source latent matching the model dimensions.
    pub fn source_latent(&self) -> Result<Latent> {
        let side = self
            .model
            .grid_side()
            .ok_or_else(|| Error::config("model.img_tokens", "must be a perfect square"))?;
        synthetic_source(self.source_seed, 1, side, self.model.channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        InjectionSchedule::new(self.schedule_params())?;
        unit("delta_base", self.delta_base)?;
        unit("alpha", self.alpha)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", format!("must be positive, got {}", self.tau)));
        }
        if let Some(g) = self.soft_mask_gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::config("soft_mask_gamma", format!("must be positive, got {g}")));
            }
        }
        LayerRatioProfile::new(self.model.layers, self.layer_ratio_beta)?;
        let prompts = [
            ("source_prompt", "source_keyword", &self.source_prompt, self.source_keyword),
            ("target_prompt", "target_keyword", &self.target_prompt, self.target_keyword),
        ];
        for (field, kw_field, prompt, keyword) in prompts {
            if prompt.len() != self.model.text_tokens {
                return Err(Error::config(
                    field,
                    format!("needs {} tokens, got {}", self.model.text_tokens, prompt.len()),
                ));
            }
            if let Some(&id) = prompt.iter().find(|&&id| id >= self.model.vocab_size) {
                return Err(Error::config(
                    field,
                    format!("token id {id} outside vocabulary of {}", self.model.vocab_size),
                ));
            }
            if keyword >= prompt.len() {
                return Err(Error::config(kw_field, format!("{keyword} is past the prompt end")));
            }
        }
        Ok(())
    }
}

/// Set `path` (dot separated) inside a JSON object, refusing unknown keys.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(path, "does not name a config field"))?;
        let slot = obj
            .get_mut(key)
            .ok_or_else(|| Error::config(path, "unknown config field"))?;
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::config(path, "empty field name"))
}

/// One entry of the per-step schedule trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    pub weight: f64,
    pub delta_eff: f64,
    pub active: bool,
}

pub fn schedule_trace(schedule: &InjectionSchedule, delta_base: f64) -> Result<Vec<TraceEntry>> {
    (0..schedule.total_steps())
        .map(|step| {
            Ok(TraceEntry {
                step,
                weight: schedule.weight(step)?,
                delta_eff: schedule.effective_ratio(delta_base, step)?,
                active: schedule.is_active(step)?,
            })
        })
        .collect()
}

pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from("step,weight,delta_eff,active\n");
    for e in trace {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            e.step,
            fmt_f64(e.weight),
            fmt_f64(e.delta_eff),
            u8::from(e.active)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub edited: Latent,
    pub reconstructed_source: Option<Latent>,
    pub inverted_noise: Latent,
    pub perturbed_noise: Latent,
    pub mask: EditMask,
    /// Tokens the perturbation was applied to.
    pub edit_tokens: TokenSet,
    pub channel_gaps: Vec<f64>,
    pub channel_weights: ChannelWeights,
    pub schedule_trace: Vec<TraceEntry>,
    pub sampling: Trajectory,
    /// `‖v(x_i; δ_{i−1}) − v(x_i; δ_i)‖₂` on the sampling states; index 0 is 0.
    pub step_jumps: Vec<f64>,
    pub diagnostics: MetricReport,
}

/// Inversion hooks: gated K/V cache, ungated probe cache, and attention
/// recording for the mask, all on the first evaluation of each step.
struct InversionPlan<'a> {
    schedule: &'a InjectionSchedule,
    cache: &'a mut KvCache,
    probe: &'a mut KvCache,
    attention: &'a mut AttentionRecord,
}

impl HookPlan for InversionPlan<'_> {
    fn hooks(&mut self, site: EvalSite) -> Result<Option<InjectionHooks<'_>>> {
        if !site.first_in_step {
            return Ok(None);
        }
        let mut hooks = InjectionHooks::off(site.step).with_probe(&mut *self.probe);
        if self.schedule.is_active(site.step)? {
            hooks.record = Some(&mut *self.cache);
            hooks.attention = Some(&mut *self.attention);
        }
        Ok(Some(hooks))
    }
}

/// Sampling hooks: inject at active steps with per-layer ratios.
struct InjectionPlan<'a> {
    cache: &'a KvCache,
    ratios: &'a [Option<Vec<f64>>],
    mask: &'a EditMask,
    global_mix: bool,
}

impl HookPlan for InjectionPlan<'_> {
    fn hooks(&mut self, site: EvalSite) -> Result<Option<InjectionHooks<'_>>> {
        let ratios = self
            .ratios
            .get(site.step)
            .ok_or(Error::Index { index: site.step, len: self.ratios.len() })?;
        Ok(ratios.as_ref().map(|r| {
            InjectionHooks::inject(
                site.step,
                Injection {
                    cache: self.cache,
                    mix_ratios: r.clone(),
                    background_mask: Some(self.mask),
                    global_mix: self.global_mix,
                },
            )
        }))
    }
}

fn phase<T>(r: Result<T>, p: crate::error::Phase) -> Result<T> {
    r.map_err(|e| e.in_phase(p))
}

fn check_source(source: &Latent, cfg: &ToyConfig) -> Result<()> {
    let (_, l, c) = source.dims();
    if l != cfg.img_tokens || c != cfg.channels {
        return Err(Error::Shape(format!(
            "source has {l} tokens × {c} channels, model expects {} × {}",
            cfg.img_tokens, cfg.channels
        )));
    }
    Ok(())
}

/// Invert then resample under the same prompt with no perturbation or
/// injection, on any velocity field.
pub fn reconstruct_with<V: VelocityField + ?Sized>(
    field: &V,
    source: &Latent,
    cond: &Conditioning,
    total_steps: usize,
    solver: SolverKind,
) -> Result<Latent> {
    use crate::error::Phase;
    let grid = TimeGrid::uniform(total_steps)?;
    let inv = phase(integrate_backward(field, source, &grid, solver, cond, &mut NoHooks), Phase::Inversion)?;
    let out = phase(
        integrate_forward(field, inv.last(), &grid, solver, cond, &mut NoHooks),
        Phase::Reconstruction,
    )?;
    Ok(out.last().clone())
}

pub fn run_reconstruction(source: &Latent, c_src: &Conditioning, cfg: &EditConfig) -> Result<Latent> {
    cfg.validate()?;
    check_source(source, &cfg.model)?;
    let model = ToyAttentionFlow::new(cfg.model.clone())?;
    reconstruct_with(&model, source, c_src, cfg.total_steps, cfg.solver)
}

pub fn run_edit(
    source: &Latent,
    c_src: &Conditioning,
    c_tgt: &Conditioning,
    cfg: &EditConfig,
) -> Result<EditResult> {
    use crate::error::Phase;
    cfg.validate()?;
    check_source(source, &cfg.model)?;
    let model = ToyAttentionFlow::new(cfg.model.clone())?;
    let (batch, tokens, channels) = source.dims();

    let z_rand = sample_gaussian(&mut SeededRng::new(cfg.seed), batch, tokens, channels)?;
    let schedule = InjectionSchedule::new(cfg.schedule_params())?;
    let grid = TimeGrid::uniform(cfg.total_steps)?;

    // inversion under the source prompt
    let mut cache = KvCache::new();
    let mut probe = KvCache::new();
    let mut attention = AttentionRecord::new(cfg.model.img_tokens, cfg.model.text_tokens);
    let mut plan = InversionPlan {
        schedule: &schedule,
        cache: &mut cache,
        probe: &mut probe,
        attention: &mut attention,
    };
    let inversion = phase(
        integrate_backward(&model, source, &grid, cfg.solver, c_src, &mut plan),
        Phase::Inversion,
    )?;
    let z_inv = inversion.last().clone();
    let keyword = match cfg.mask_keyword {
        MaskKeyword::Source => c_src.keyword_index,
        MaskKeyword::Target => c_tgt.keyword_index,
    };
    let mask = extract_mask(&attention, keyword, cfg.soft_mask_gamma)?;

    // perturbation over the edit region
    let (edit_tokens, mask_fallback) = if mask.hard.is_empty() {
        log::warn!("edit mask is empty; perturbing every token");
        (TokenSet::all(tokens), true)
    } else {
        (mask.hard.clone(), false)
    };
    let pcfg = cfg.perturbation_config();
    let channel_gaps = channel_gap(&z_inv, &z_rand, &edit_tokens)?;
    let (perturbed, weights) = match cfg.perturbation {
        PerturbationMode::ChannelSelective => {
            latents_shift_channel_selective(&z_inv, &z_rand, &pcfg, &edit_tokens)?
        }
        PerturbationMode::Uniform => (
            latents_shift_uniform(&z_inv, &z_rand, cfg.alpha, &edit_tokens)?,
            ChannelWeights::uniform(channels, cfg.tau),
        ),
    };

    // sampling under the target prompt with progressive injection
    let profile = LayerRatioProfile::new(model.layer_count(), cfg.layer_ratio_beta)?;
    let step_ratios: Vec<Option<Vec<f64>>> = (0..cfg.total_steps)
        .map(|i| {
            Ok(schedule
                .is_active(i)?
                .then(|| profile.layer_ratios(schedule.effective_ratio(cfg.delta_base, i).unwrap_or(0.0))))
        })
        .collect::<Result<_>>()?;
    let mut inject = InjectionPlan {
        cache: &cache,
        ratios: &step_ratios,
        mask: &mask,
        global_mix: cfg.global_mix,
    };
    let sampling = phase(
        integrate_forward(&model, &perturbed, &grid, cfg.solver, c_tgt, &mut inject),
        Phase::Sampling,
    )?;
    let edited = sampling.last().clone();

    let reconstructed = phase(
        integrate_forward(&model, &z_inv, &grid, cfg.solver, c_src, &mut NoHooks),
        Phase::Reconstruction,
    )?
    .last()
    .clone();

    // diagnostics
    let jump_probe = JumpProbe {
        cache: &probe,
        step: 0,
        mask: Some(&mask),
        global_mix: cfg.global_mix,
    };
    let as_ratios = |r: &Option<Vec<f64>>| -> Option<Vec<f64>> {
        r.as_ref().filter(|v| v.iter().any(|&x| x != 0.0)).cloned()
    };
    let mut step_jumps = vec![0.0; cfg.total_steps];
    for i in 1..cfg.total_steps {
        let before = as_ratios(&step_ratios[i - 1]);
        let after = as_ratios(&step_ratios[i]);
        if before == after {
            continue;
        }
        step_jumps[i] = velocity_change(
            &model,
            &sampling.states[i],
            grid.t(i),
            c_tgt,
            &JumpProbe { step: i, ..jump_probe },
            before.as_deref(),
            after.as_deref(),
        )?;
    }

    let mut diagnostics = MetricReport::default();
    diagnostics.insert("max_step_delta", schedule.max_step_delta(cfg.delta_base)?);
    diagnostics.insert("velocity_jump", step_jumps.iter().copied().fold(0.0, f64::max));
    if cfg.schedule == ScheduleFamily::Binary {
        let cutoff = step_jumps.get(cfg.injection_steps).copied().unwrap_or(0.0);
        diagnostics.insert("cutoff_velocity_jump", cutoff);
    }
    diagnostics.insert(
        "evals",
        (inversion.velocity_evals + sampling.velocity_evals) as f64,
    );
    let peak = default_peak(&reconstructed);
    diagnostics.insert("psnr", psnr(&edited, &reconstructed, peak)?);
    diagnostics.insert("ssim", ssim(&edited, &reconstructed, &SsimParams::with_peak(peak))?);
    diagnostics.insert("mask_coverage", edit_tokens.len() as f64 / tokens as f64);
    diagnostics.insert("mask_fallback", f64::from(u8::from(mask_fallback)));
    diagnostics.insert("channel_weight_variance", weights.variance());

    Ok(EditResult {
        edited,
        reconstructed_source: Some(reconstructed),
        inverted_noise: z_inv,
        perturbed_noise: perturbed,
        mask,
        edit_tokens,
        channel_gaps,
        channel_weights: weights,
        schedule_trace: schedule_trace(&schedule, cfg.delta_base)?,
        sampling,
        step_jumps,
        diagnostics,
    })
}

/// Edit of the config's own synthetic source with its own prompts.
pub fn run_configured_edit(cfg: &EditConfig) -> Result<EditResult> {
    cfg.validate()?;
    run_edit(
        &cfg.source_latent()?,
        &cfg.source_conditioning()?,
        &cfg.target_conditioning()?,
        cfg,
    )
}

/// One summary row per run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run_id: usize,
    pub schedule: ScheduleFamily,
    pub total_steps: usize,
    pub injection_steps: usize,
    pub delta_base: f64,
    pub alpha: f64,
    pub tau: f64,
    pub solver: SolverKind,
    pub psnr: f64,
    pub ssim: f64,
    pub max_step_delta: f64,
    pub velocity_jump: f64,
    pub evals: usize,
}

impl SummaryRow {
    pub fn new(run_id: usize, cfg: &EditConfig, result: &EditResult) -> Self {
        let d = |k: &str| result.diagnostics.get(k).unwrap_or(f64::NAN);
        Self {
            run_id,
            schedule: cfg.schedule,
            total_steps: cfg.total_steps,
            injection_steps: cfg.injection_steps,
            delta_base: cfg.delta_base,
            alpha: cfg.alpha,
            tau: cfg.tau,
            solver: cfg.solver,
            psnr: d("psnr"),
            ssim: d("ssim"),
            max_step_delta: d("max_step_delta"),
            velocity_jump: d("velocity_jump"),
            evals: d("evals") as usize,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.schedule.name(),
            self.total_steps,
            self.injection_steps,
            fmt_f64(self.delta_base),
            fmt_f64(self.alpha),
            fmt_f64(self.tau),
            self.solver.name(),
            fmt_f64(self.psnr),
            fmt_f64(self.ssim),
            fmt_f64(self.max_step_delta),
            fmt_f64(self.velocity_jump),
            self.evals
        )
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// A named config field and the values it takes in a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub field: String,
    pub values: Vec<Value>,
}

impl Axis {
    pub fn new(field: impl Into<String>, values: Vec<Value>) -> Self {
        Self {
            field: field.into(),
            values,
        }
    }
}

/// Cartesian product of axis values applied to `base`, first axis slowest.
pub fn expand_grid(base: &EditConfig, axes: &[Axis]) -> Result<Vec<EditConfig>> {
    let mut configs = vec![base.clone()];
    for axis in axes {
        let mut next = Vec::with_capacity(configs.len() * axis.values.len());
        for cfg in &configs {
            for v in &axis.values {
                next.push(cfg.with_field(&axis.field, v.clone())?);
            }
        }
        configs = next;
    }
    Ok(configs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub config: EditConfig,
    pub result: EditResult,
    pub summary: SummaryRow,
}

/// One edit per grid point, run in parallel, returned in grid order. Every
/// row shares the base seed so rows differ only by the swept fields.
pub fn run_ablation_grid(
    source: &Latent,
    c_src: &Conditioning,
    c_tgt: &Conditioning,
    base: &EditConfig,
    axes: &[Axis],
) -> Result<Vec<GridRun>> {
    let configs = expand_grid(base, axes)?;
    configs
        .into_par_iter()
        .enumerate()
        .map(|(run_id, config)| {
            let result = run_edit(source, c_src, c_tgt, &config)?;
            let summary = SummaryRow::new(run_id, &config, &result);
            Ok(GridRun { config, result, summary })
        })
        .collect()
}

/// Channel weights for a list of temperatures given fixed gaps.
pub fn temperature_sweep(gaps: &[f64], taus: &[f64]) -> Result<Vec<ChannelWeights>> {
    taus.iter().map(|&tau| channel_weights(gaps, tau)).collect()
}
