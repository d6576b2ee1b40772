//! Seeded single-stream attention network used as a stand-in flow backbone.
//!
//! Image tokens are projected from latent channels and given learned-looking
//! (seeded) positional embeddings; text tokens come from a seeded embedding
//! table; a sinusoidal time embedding is mixed in and added to every token.
//! Each block is pre-RMS-norm self-attention over the joint sequence with a
//! residual connection. The image rows of the final hidden state are
//! projected back to latent channels to give the velocity.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{kv_mix, Conditioning, InjectionHooks, KvEntry, VelocityField};
use crate::error::{Error, Result};
use crate::latent::{Latent, SeededRng};

const TIME_FREQUENCIES: usize = 8;
const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Must be a perfect square; tokens form a `√L × √L` grid.
    pub img_tokens: usize,
    pub text_tokens: usize,
    pub channels: usize,
    pub vocab_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 2,
            embed_dim: 32,
            heads: 1,
            img_tokens: 16,
            text_tokens: 4,
            channels: 8,
            vocab_size: 16,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.layers", self.layers),
            ("model.embed_dim", self.embed_dim),
            ("model.heads", self.heads),
            ("model.img_tokens", self.img_tokens),
            ("model.text_tokens", self.text_tokens),
            ("model.channels", self.channels),
            ("model.vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("must divide embed_dim = {}", self.embed_dim),
            ));
        }
        if self.grid_side().is_none() {
            return Err(Error::config("model.img_tokens", "must be a perfect square"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> Option<usize> {
        let side = (self.img_tokens as f64).sqrt().round() as usize;
        (side * side == self.img_tokens).then_some(side)
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyAttentionFlow {
    cfg: ToyConfig,
    w_in: Array2<f64>,
    pos: Array2<f64>,
    text_table: Array2<f64>,
    w_time: Array2<f64>,
    blocks: Vec<Block>,
    w_out: Array2<f64>,
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.standard_normal() * scale)
}

fn rms_norm(h: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = h.to_owned();
    for mut row in out.rows_mut() {
        let rms = (row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt();
        row.mapv_inplace(|x| x / rms);
    }
    out
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

impl ToyAttentionFlow {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let d = cfg.embed_dim;
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        let w_in = gaussian_matrix(&mut rng, cfg.channels, d, inv_sqrt(cfg.channels));
        let pos = gaussian_matrix(&mut rng, cfg.img_tokens, d, 0.5);
        let text_table = gaussian_matrix(&mut rng, cfg.vocab_size, d, 1.0);
        let w_time = gaussian_matrix(&mut rng, 2 * TIME_FREQUENCIES, d, 0.3 * inv_sqrt(2 * TIME_FREQUENCIES));
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                wq: gaussian_matrix(&mut rng, d, d, inv_sqrt(d)),
                wk: gaussian_matrix(&mut rng, d, d, inv_sqrt(d)),
                wv: gaussian_matrix(&mut rng, d, d, inv_sqrt(d)),
                wo: gaussian_matrix(&mut rng, d, d, 0.5 * inv_sqrt(d)),
            })
            .collect();
        let w_out = gaussian_matrix(&mut rng, d, cfg.channels, inv_sqrt(d));
        Ok(Self {
            cfg,
            w_in,
            pos,
            text_table,
            w_time,
            blocks,
            w_out,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn total_tokens(&self) -> usize {
        self.cfg.img_tokens + self.cfg.text_tokens
    }

    fn time_embedding(&self, t: f64) -> Array1<f64> {
        let feats: Array1<f64> = (0..2 * TIME_FREQUENCIES)
            .map(|j| {
                let omega = std::f64::consts::PI * 10f64.powf((j / 2) as f64 / (TIME_FREQUENCIES - 1) as f64);
                if j % 2 == 0 {
                    (omega * t).sin()
                } else {
                    (omega * t).cos()
                }
            })
            .collect();
        feats.dot(&self.w_time)
    }

    fn check_inputs(&self, z: &Latent, cond: &Conditioning) -> Result<()> {
        let (_, l, c) = z.dims();
        if l != self.cfg.img_tokens || c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "toy model expects {} tokens × {} channels, got {l} × {c}",
                self.cfg.img_tokens, self.cfg.channels
            )));
        }
        if cond.prompt_token_ids.len() != self.cfg.text_tokens {
            return Err(Error::Shape(format!(
                "prompt has {} tokens, model expects {}",
                cond.prompt_token_ids.len(),
                self.cfg.text_tokens
            )));
        }
        if let Some(&bad) = cond.prompt_token_ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Index {
                index: bad,
                len: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Initial hidden states, `batch × (img + text) × dim`.
    fn embed(&self, z: &Latent, t: f64, cond: &Conditioning) -> Array3<f64> {
        let (b, l_img, _) = z.dims();
        let d = self.cfg.embed_dim;
        let te = self.time_embedding(t);
        let mut h = Array3::zeros((b, self.total_tokens(), d));
        for bi in 0..b {
            let img = z.batch_view(bi).dot(&self.w_in) + &self.pos;
            h.slice_mut(s![bi, ..l_img, ..]).assign(&img);
            for (j, &id) in cond.prompt_token_ids.iter().enumerate() {
                h.slice_mut(s![bi, l_img + j, ..]).assign(&self.text_table.row(id));
            }
            for mut row in h.index_axis_mut(Axis(0), bi).rows_mut() {
                row += &te;
            }
        }
        h
    }

    /// Runs the network; `attention_rows` collects each layer's full
    /// attention matrices (head-averaged) when requested, for tests.
    fn forward(
        &self,
        z: &Latent,
        t: f64,
        cond: &Conditioning,
        mut hooks: Option<InjectionHooks<'_>>,
        mut attention_rows: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<Latent> {
        self.check_inputs(z, cond)?;
        let (b, l_img, _) = z.dims();
        let l_tot = self.total_tokens();
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = self.embed(z, t, cond);

        for (layer, block) in self.blocks.iter().enumerate() {
            let mut q = Array3::zeros((b, l_tot, d));
            let mut k = Array3::zeros((b, l_tot, d));
            let mut v = Array3::zeros((b, l_tot, d));
            for bi in 0..b {
                let x = rms_norm(h.index_axis(Axis(0), bi));
                q.index_axis_mut(Axis(0), bi).assign(&x.dot(&block.wq));
                k.index_axis_mut(Axis(0), bi).assign(&x.dot(&block.wk));
                v.index_axis_mut(Axis(0), bi).assign(&x.dot(&block.wv));
            }

            if let Some(hk) = hooks.as_mut() {
                if let Some(cache) = hk.record.as_deref_mut() {
                    cache.insert(hk.step, layer, KvEntry { k: k.clone(), v: v.clone() })?;
                }
                if let Some(probe) = hk.probe.as_deref_mut() {
                    probe.insert(hk.step, layer, KvEntry { k: k.clone(), v: v.clone() })?;
                }
                if let Some(inj) = hk.inject.as_ref() {
                    let src = inj.cache.get(hk.step, layer)?;
                    if src.k.dim() != k.dim() {
                        return Err(Error::Shape(format!(
                            "cached K/V {:?} vs current {:?}",
                            src.k.dim(),
                            k.dim()
                        )));
                    }
                    let ratio = *inj.mix_ratios.get(layer).ok_or_else(|| {
                        Error::State(format!("no mix ratio given for layer {layer}"))
                    })?;
                    for bi in 0..b {
                        // text rows always keep the target prompt's features
                        let img = s![bi, ..l_img, ..];
                        let (km, vm) = kv_mix(
                            src.k.slice(img),
                            src.v.slice(img),
                            k.slice(img),
                            v.slice(img),
                            ratio,
                            inj.background_mask,
                            inj.global_mix,
                        )?;
                        k.slice_mut(img).assign(&km);
                        v.slice_mut(img).assign(&vm);
                    }
                }
            }

            let mut attn_mean = Array2::<f64>::zeros((l_tot, l_tot));
            for bi in 0..b {
                let mut out = Array2::<f64>::zeros((l_tot, d));
                for head in 0..heads {
                    let cols = head * dh..(head + 1) * dh;
                    let qh = q.slice(s![bi, .., cols.clone()]);
                    let kh = k.slice(s![bi, .., cols.clone()]);
                    let vh = v.slice(s![bi, .., cols.clone()]);
                    let mut scores = qh.dot(&kh.t()) * scale;
                    softmax_rows(&mut scores);
                    out.slice_mut(s![.., cols]).assign(&scores.dot(&vh));
                    attn_mean.scaled_add(1.0 / (heads * b) as f64, &scores);
                }
                let update = out.dot(&block.wo);
                let mut hb = h.index_axis_mut(Axis(0), bi);
                hb += &update;
            }

            if let Some(rec) = hooks.as_mut().and_then(|hk| hk.attention.as_deref_mut()) {
                rec.accumulate(attn_mean.slice(s![..l_img, l_img..]))?;
            }
            if let Some(rows) = attention_rows.as_deref_mut() {
                rows.push(attn_mean);
            }
        }

        let mut vel = Array3::zeros((b, l_img, self.cfg.channels));
        for bi in 0..b {
            let img = h.slice(s![bi, ..l_img, ..]);
            vel.index_axis_mut(Axis(0), bi).assign(&img.dot(&self.w_out));
        }
        Ok(Latent::from_array_unchecked(vel))
    }

    /// Head- and batch-averaged attention matrix of every layer.
    pub fn attention_maps(&self, z: &Latent, t: f64, cond: &Conditioning) -> Result<Vec<Array2<f64>>> {
        let mut maps = Vec::new();
        self.forward(z, t, cond, None, Some(&mut maps))?;
        Ok(maps)
    }
}

impl VelocityField for ToyAttentionFlow {
    fn evaluate(
        &self,
        z: &Latent,
        t: f64,
        cond: &Conditioning,
        hooks: Option<InjectionHooks<'_>>,
    ) -> Result<Latent> {
        self.forward(z, t, cond, hooks, None)
    }

    fn layer_count(&self) -> usize {
        self.cfg.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::sample_gaussian;
    use crate::model::{Injection, KvCache};

    fn setup(seed: u64) -> (ToyAttentionFlow, Latent, Conditioning) {
        let model = ToyAttentionFlow::new(ToyConfig { seed, ..Default::default() }).unwrap();
        let z = sample_gaussian(&mut SeededRng::new(seed + 100), 1, 16, 8).unwrap();
        let cond = Conditioning::new(vec![1, 5, 9, 3], 2).unwrap();
        (model, z, cond)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (model, z, cond) = setup(1);
        let multi = ToyAttentionFlow::new(ToyConfig { heads: 4, seed: 1, ..Default::default() }).unwrap();
        for m in [&model, &multi] {
            for map in m.attention_maps(&z, 0.37, &cond).unwrap() {
                for row in map.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn record_then_inject_is_identity() {
        let (model, z, cond) = setup(2);
        let mut cache = KvCache::new();
        let recorded = model
            .evaluate(&z, 0.5, &cond, Some(InjectionHooks::record(3, &mut cache)))
            .unwrap();
        assert_eq!(cache.len(), 2);
        let injected = model
            .evaluate(
                &z,
                0.5,
                &cond,
                Some(InjectionHooks::inject(
                    3,
                    Injection { cache: &cache, mix_ratios: vec![1.0, 1.0], background_mask: None, global_mix: false },
                )),
            )
            .unwrap();
        assert!(recorded.max_abs_diff(&injected).unwrap() < 1e-6);
    }

    #[test]
    fn off_mode_ignores_cache() {
        let (model, z, cond) = setup(3);
        let mut cache = KvCache::new();
        let first = model
            .evaluate(&z, 0.2, &cond, Some(InjectionHooks::record(0, &mut cache)))
            .unwrap();
        cache.get_mut(0, 0).unwrap().k.fill(7.0);
        let off = model.evaluate(&z, 0.2, &cond, Some(InjectionHooks::off(0))).unwrap();
        assert_eq!(first, off);
        assert_eq!(off, model.evaluate(&z, 0.2, &cond, None).unwrap());
    }

    #[test]
    fn inject_without_cache_entry_misses() {
        let (model, z, cond) = setup(4);
        let cache = KvCache::new();
        let err = model
            .evaluate(
                &z,
                0.1,
                &cond,
                Some(InjectionHooks::inject(
                    5,
                    Injection { cache: &cache, mix_ratios: vec![0.5, 0.5], background_mask: None, global_mix: true },
                )),
            )
            .unwrap_err();
        assert!(matches!(err, Error::CacheMiss { step: 5, layer: 0 }));
    }

    #[test]
    fn seeds_change_the_field() {
        let (a, z, cond) = setup(5);
        let b = ToyAttentionFlow::new(ToyConfig { seed: 6, ..Default::default() }).unwrap();
        let va = a.evaluate(&z, 0.4, &cond, None).unwrap();
        let vb = b.evaluate(&z, 0.4, &cond, None).unwrap();
        assert!(va.max_abs_diff(&vb).unwrap() > 1e-6);
    }

    #[test]
    fn small_input_change_small_output_change() {
        let (model, z, cond) = setup(7);
        let mut bumped = z.clone().into_array();
        bumped[[0, 3, 2]] += 1e-6;
        let bumped = Latent::from_array(bumped).unwrap();
        let va = model.evaluate(&z, 0.6, &cond, None).unwrap();
        let vb = model.evaluate(&bumped, 0.6, &cond, None).unwrap();
        assert!(va.max_abs_diff(&vb).unwrap() < 1e-2);
    }

    #[test]
    fn shape_checks() {
        let (model, _, cond) = setup(8);
        let wrong = Latent::zeros(1, 9, 8).unwrap();
        assert!(matches!(model.evaluate(&wrong, 0.0, &cond, None), Err(Error::Shape(_))));
        let z = Latent::zeros(1, 16, 8).unwrap();
        let short = Conditioning::new(vec![1, 2], 0).unwrap();
        assert!(matches!(model.evaluate(&z, 0.0, &short, None), Err(Error::Shape(_))));
        assert!(ToyAttentionFlow::new(ToyConfig { img_tokens: 15, ..Default::default() }).is_err());
    }

    #[test]
    fn batched_evaluation_matches_single() {
        let (model, _, cond) = setup(9);
        let z2 = sample_gaussian(&mut SeededRng::new(1), 2, 16, 8).unwrap();
        let v2 = model.evaluate(&z2, 0.3, &cond, None).unwrap();
        for bi in 0..2 {
            let zi = Latent::from_array(z2.array().slice(s![bi..bi + 1, .., ..]).to_owned()).unwrap();
            let vi = model.evaluate(&zi, 0.3, &cond, None).unwrap();
            let expect = v2.array().slice(s![bi..bi + 1, .., ..]).to_owned();
            assert!((vi.array() - &expect).iter().all(|x| x.abs() < 1e-12));
        }
    }
}
