//! Latent tensors, seeded noise and per-channel statistics.
//!
//! A [`Latent`] is a dense `B × L × C` array (batch, tokens, channels) stored
//! row-major in that order. Every other module consumes it through the
//! statistics helpers here, which all use the population (divide-by-N)
//! standard deviation.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;

/// Guard added to any standard deviation used as a divisor.
pub const EPS_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    data: Array3<f64>,
}

impl Latent {
    pub fn zeros(b: usize, l: usize, c: usize) -> Result<Self> {
        check_dims(b, l, c)?;
        Ok(Self {
            data: Array3::zeros((b, l, c)),
        })
    }

    /// Build from a flat row-major buffer of length `b * l * c`.
    pub fn from_vec(b: usize, l: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(b, l, c)?;
        if values.len() != b * l * c {
            return Err(Error::Shape(format!(
                "expected {} values for {b}x{l}x{c}, got {}",
                b * l * c,
                values.len()
            )));
        }
        Self::from_array(Array3::from_shape_vec((b, l, c), values).expect("length checked"))
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let (b, l, c) = data.dim();
        check_dims(b, l, c)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn from_fn(
        b: usize,
        l: usize,
        c: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        check_dims(b, l, c)?;
        Self::from_array(Array3::from_shape_fn((b, l, c), f))
    }

    /// Wraps an array produced by arithmetic on existing latents. Finiteness
    /// is the caller's concern (solvers check it themselves).
    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    /// Token × channel view of one batch element.
    pub fn batch_view(&self, b: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), b)
    }

    pub fn get(&self, b: usize, l: usize, c: usize) -> f64 {
        self.data[[b, l, c]]
    }

    /// Flat values in layout order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_shape(&self, other: &Latent) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    /// `self + scale * other`, used by the solvers.
    pub fn axpy(&self, scale: f64, other: &Latent) -> Latent {
        let mut out = self.data.clone();
        out.scaled_add(scale, &other.data);
        Latent::from_array_unchecked(out)
    }

    pub fn l2_distance(&self, other: &Latent) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn max_abs_diff(&self, other: &Latent) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Writes `b,l,c,value` rows in layout order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "b,l,c,value")?;
        for ((b, l, c), v) in self.data.indexed_iter() {
            writeln!(w, "{b},{l},{c},{}", fmt_f64(*v))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("b,l,c,value\n");
        for ((b, l, c), v) in self.data.indexed_iter() {
            let _ = writeln!(s, "{b},{l},{c},{}", fmt_f64(*v));
        }
        s
    }

    /// Reads the format produced by [`Latent::write_csv`]. Rows must be in
    /// layout order; dimensions are inferred from the largest indices.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty latent csv".into()))??;
        if header.trim() != "b,l,c,value" {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!("row {n}: expected 4 fields")));
            }
            let idx = |i: usize| -> Result<usize> {
                fields[i]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {n}: {e}")))
            };
            let value: f64 = fields[3]
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("row {n}: {e}")))?;
            rows.push((idx(0)?, idx(1)?, idx(2)?, value));
        }
        let (b, l, c) = rows.iter().fold((0, 0, 0), |(b, l, c), r| {
            (b.max(r.0 + 1), l.max(r.1 + 1), c.max(r.2 + 1))
        });
        if rows.len() != b * l * c {
            return Err(Error::Parse(format!(
                "{} rows do not fill a {b}x{l}x{c} latent",
                rows.len()
            )));
        }
        for (flat, &(rb, rl, rc, _)) in rows.iter().enumerate() {
            if (rb * l + rl) * c + rc != flat {
                return Err(Error::Parse(format!("row {flat} is out of layout order")));
            }
        }
        Latent::from_vec(b, l, c, rows.into_iter().map(|r| r.3).collect())
    }
}

fn check_dims(b: usize, l: usize, c: usize) -> Result<()> {
    if b == 0 || l == 0 || c == 0 {
        return Err(Error::Dimension(format!(
            "all dimensions must be positive, got {b}x{l}x{c}"
        )));
    }
    Ok(())
}

/// Deterministic generator backed by ChaCha20 (`rand_chacha::ChaCha20Rng`).
///
/// Streams are stable for a given seed on every platform this crate builds on.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }
}

pub fn sample_gaussian(rng: &mut SeededRng, b: usize, l: usize, c: usize) -> Result<Latent> {
    check_dims(b, l, c)?;
    let values = (0..b * l * c).map(|_| rng.standard_normal()).collect();
    Latent::from_vec(b, l, c, values)
}

/// Seeded smooth per-channel fields on a `side × side` token grid, standing
/// in for an encoded source image. Each channel is a sum of three low
/// frequency plane waves plus a channel-specific offset.
pub fn synthetic_source(seed: u64, b: usize, side: usize, c: usize) -> Result<Latent> {
    check_dims(b, side, c)?;
    let mut rng = SeededRng::new(seed);
    let waves: Vec<Vec<[f64; 4]>> = (0..b * c)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let amp = 0.4 + 0.6 * rng.uniform();
                    let fx = (rng.uniform() * 2.0).floor();
                    let fy = (rng.uniform() * 2.0).floor() + if fx == 0.0 { 1.0 } else { 0.0 };
                    let phase = rng.uniform() * std::f64::consts::TAU;
                    [amp, fx, fy, phase]
                })
                .collect()
        })
        .collect();
    let offsets: Vec<f64> = (0..b * c).map(|_| rng.standard_normal() * 0.8).collect();
    let side_f = side as f64;
    Latent::from_fn(b, side * side, c, |(bi, l, ci)| {
        let (y, x) = ((l / side) as f64, (l % side) as f64);
        let k = bi * c + ci;
        offsets[k]
            + waves[k]
                .iter()
                .map(|[amp, fx, fy, phase]| {
                    amp * (std::f64::consts::TAU * (fx * x + fy * y) / side_f + phase).sin()
                })
                .sum::<f64>()
    })
}

/// Sorted, de-duplicated token indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSet(Vec<usize>);

impl TokenSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    pub fn all(len: usize) -> Self {
        Self((0..len).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.0.binary_search(&token).is_ok()
    }

    pub(crate) fn validate(&self, len: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::EmptySelection);
        }
        match self.0.last() {
            Some(&last) if last >= len => Err(Error::Index { index: last, len }),
            _ => Ok(()),
        }
    }
}

impl FromIterator<usize> for TokenSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel mean and population std over batch × selected tokens.
/// `tokens = None` selects every token.
pub fn channel_stats(z: &Latent, tokens: Option<&TokenSet>) -> Result<ChannelStats> {
    let (b, l, c) = z.dims();
    let all;
    let tokens = match tokens {
        Some(t) => {
            t.validate(l)?;
            t
        }
        None => {
            all = TokenSet::all(l);
            &all
        }
    };
    let n = (b * tokens.len()) as f64;
    let mean = channel_mean_over(z, tokens)?;
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for &li in tokens.indices() {
            for (ci, v) in var.iter_mut().enumerate() {
                let d = z.get(bi, li, ci) - mean[ci];
                *v += d * d;
            }
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(ChannelStats { mean, std })
}

/// Per-channel arithmetic mean over batch × `tokens`.
pub fn channel_mean_over(z: &Latent, tokens: &TokenSet) -> Result<Vec<f64>> {
    let (b, l, c) = z.dims();
    tokens.validate(l)?;
    let mut sum = vec![0.0; c];
    for bi in 0..b {
        for &li in tokens.indices() {
            for (ci, s) in sum.iter_mut().enumerate() {
                *s += z.get(bi, li, ci);
            }
        }
    }
    let n = (b * tokens.len()) as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}
