use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2};

use super::EditMask;
use crate::error::{check_unit_interval, Error, Result};

/// Keys and values of one layer at one step, shaped `batch × tokens × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub k: Array3<f64>,
    pub v: Array3<f64>,
}

/// Cached attention features keyed by `(sampling step, layer)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    entries: BTreeMap<(usize, usize), KvEntry>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: usize, layer: usize, entry: KvEntry) -> Result<()> {
        if self.entries.contains_key(&(step, layer)) {
            return Err(Error::State(format!(
                "kv cache already holds step {step}, layer {layer}"
            )));
        }
        self.entries.insert((step, layer), entry);
        Ok(())
    }

    pub fn get(&self, step: usize, layer: usize) -> Result<&KvEntry> {
        self.entries
            .get(&(step, layer))
            .ok_or(Error::CacheMiss { step, layer })
    }

    pub fn get_mut(&mut self, step: usize, layer: usize) -> Option<&mut KvEntry> {
        self.entries.get_mut(&(step, layer))
    }

    pub fn contains(&self, step: usize, layer: usize) -> bool {
        self.entries.contains_key(&(step, layer))
    }

    /// Distinct steps with at least one cached layer, ascending.
    pub fn steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self.entries.keys().map(|&(s, _)| s).collect();
        steps.dedup();
        steps
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Blend source and target K/V: `ratio·src + (1−ratio)·tgt` per row.
///
/// With `global_mix` every row uses `ratio`. Otherwise rows covered by `mask`
/// use `ratio·(1 − soft_row)`, so edit tokens keep their own features, and
/// rows past the mask length (text tokens) keep the target. Without a mask
/// every row counts as background.
pub fn kv_mix(
    k_src: ArrayView2<'_, f64>,
    v_src: ArrayView2<'_, f64>,
    k_tgt: ArrayView2<'_, f64>,
    v_tgt: ArrayView2<'_, f64>,
    ratio: f64,
    mask: Option<&EditMask>,
    global_mix: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_unit_interval("ratio", ratio)?;
    let dim = k_tgt.dim();
    if k_src.dim() != dim || v_src.dim() != dim || v_tgt.dim() != dim {
        return Err(Error::Shape(format!(
            "kv_mix operands {:?} {:?} {:?} {:?}",
            k_src.dim(),
            v_src.dim(),
            k_tgt.dim(),
            v_tgt.dim()
        )));
    }
    let row_ratio = |row: usize| -> f64 {
        match (global_mix, mask) {
            (true, _) | (false, None) => ratio,
            (false, Some(m)) => m.soft.get(row).map_or(0.0, |s| ratio * (1.0 - s)),
        }
    };
    let mut k = k_tgt.to_owned();
    let mut v = v_tgt.to_owned();
    for row in 0..dim.0 {
        let r = row_ratio(row);
        if r == 0.0 {
            continue;
        }
        for ((kt, vt), (ks, vs)) in k
            .row_mut(row)
            .iter_mut()
            .zip(v.row_mut(row).iter_mut())
            .zip(k_src.row(row).iter().zip(v_src.row(row).iter()))
        {
            *kt = r * ks + (1.0 - r) * *kt;
            *vt = r * vs + (1.0 - r) * *vt;
        }
    }
    Ok((k, v))
}

/// Running sum of image-token → text-token attention, for mask extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    sum: Array2<f64>,
    count: usize,
}

impl AttentionRecord {
    pub fn new(img_tokens: usize, text_tokens: usize) -> Self {
        Self {
            sum: Array2::zeros((img_tokens, text_tokens)),
            count: 0,
        }
    }

    /// Adds one `img_tokens × text_tokens` attention slice.
    pub fn accumulate(&mut self, slice: ArrayView2<'_, f64>) -> Result<()> {
        if slice.dim() != self.sum.dim() {
            return Err(Error::Shape(format!(
                "attention slice {:?} vs record {:?}",
                slice.dim(),
                self.sum.dim()
            )));
        }
        self.sum += &slice;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn img_tokens(&self) -> usize {
        self.sum.dim().0
    }

    pub fn text_tokens(&self) -> usize {
        self.sum.dim().1
    }

    /// Mean attention from each image token to text token `keyword`.
    pub fn keyword_map(&self, keyword: usize) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::State("no attention has been recorded".into()));
        }
        if keyword >= self.text_tokens() {
            return Err(Error::Index {
                index: keyword,
                len: self.text_tokens(),
            });
        }
        let n = self.count as f64;
        Ok(self.sum.column(keyword).iter().map(|s| s / n).collect())
    }
}
