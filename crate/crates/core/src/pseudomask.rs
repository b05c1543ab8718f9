//! Query pseudo-masks and mask-quality metrics.
//!
//! The conventional pseudo-mask scores each query pixel by its best cosine
//! match among support foreground pixels of the backbone-like features. The
//! attention-based pseudo-mask takes, per pixel, the largest attention weight
//! any token places there, rescaled so the peak is 1.

use crate::autodiff::kernels::{gemm, Layout};
use crate::autodiff::{Graph, Tensor};
use crate::error::{dim_err, FcpError, Result};
use crate::synth::FeatureMap;

/// `H × W` map with values in `[0, 1]`; `binary` additionally means `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    binary: bool,
}

impl Mask {
    pub fn soft(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() || height == 0 || width == 0 {
            return dim_err("mask", format!("{height}x{width} with {} values", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FcpError::Contract(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Mask {
            height,
            width,
            values,
            binary: false,
        })
    }

    pub fn binary(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(FcpError::Contract("binary mask holds a value other than 0 or 1".into()));
        }
        let mut m = Mask::soft(height, width, values)?;
        m.binary = true;
        Ok(m)
    }

    pub fn from_bools(height: usize, width: usize, fg: &[bool]) -> Result<Self> {
        Mask::binary(height, width, fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        if value == 0.0 || value == 1.0 {
            Mask::binary(height, width, vec![value; height * width])
        } else {
            Mask::soft(height, width, vec![value; height * width])
        }
    }

    /// Soft mask from graph values (clamped into `[0, 1]` against rounding).
    pub fn from_tensor(t: &Tensor<'_>, height: usize, width: usize) -> Result<Self> {
        let v = t.to_vec().into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
        Mask::soft(height, width, v)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    /// Number of pixels at or above 0.5.
    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn binarize(&self, threshold: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
            binary: true,
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1.0 - v).collect(),
            binary: self.binary,
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= 0.5).collect()
    }

    /// Non-differentiable `1 × HW` graph tensor.
    pub fn to_tensor<'g>(&self, g: &'g Graph) -> Result<Tensor<'g>> {
        g.constant(self.values.clone(), &[1, self.pixels()])
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

fn check_support(fq: &FeatureMap, fs: &FeatureMap, ms: &Mask) -> Result<()> {
    if fq.channels != fs.channels {
        return dim_err("pseudo_mask", format!("channels {} vs {}", fq.channels, fs.channels));
    }
    if fs.height != ms.height() || fs.width != ms.width() {
        return dim_err("pseudo_mask", "support mask does not match support features");
    }
    if !ms.is_binary() {
        return Err(FcpError::Contract("support mask must be binary".into()));
    }
    Ok(())
}

/// Normalized pixel-major rows of the selected pixels.
fn unit_rows(map: &FeatureMap, pixels: impl Iterator<Item = usize>) -> Result<Vec<f64>> {
    let c = map.channels;
    let hw = map.pixels();
    let mut out = Vec::new();
    for p in pixels {
        let start = out.len();
        out.extend((0..c).map(|k| map.values[k * hw + p]));
        let n = out[start..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(FcpError::Degenerate(format!("zero feature vector at pixel {p}")));
        }
        out[start..].iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// Raw score per query pixel: the maximum cosine similarity to any
/// foreground pixel of any support shot. Values lie in `[-1, 1]`.
pub fn conventional_similarity(fq: &FeatureMap, supports: &[(&FeatureMap, &Mask)]) -> Result<Vec<f64>> {
    if supports.is_empty() {
        return Err(FcpError::Degenerate("no support shots".into()));
    }
    let hw = fq.pixels();
    let c = fq.channels;
    let q = unit_rows(fq, 0..hw)?;
    let mut best = vec![f64::NEG_INFINITY; hw];
    let mut any_fg = false;
    for (fs, ms) in supports {
        check_support(fq, fs, ms)?;
        let fg: Vec<usize> = (0..ms.pixels()).filter(|&p| ms.values()[p] == 1.0).collect();
        if fg.is_empty() {
            continue;
        }
        any_fg = true;
        let s = unit_rows(fs, fg.iter().copied())?;
        let mut sims = vec![0.0; hw * fg.len()];
        gemm(
            hw,
            c,
            fg.len(),
            1.0,
            &q,
            Layout::Normal,
            &s,
            Layout::Transposed,
            0.0,
            &mut sims,
        );
        for (b, row) in best.iter_mut().zip(sims.chunks_exact(fg.len())) {
            *b = row.iter().copied().fold(*b, f64::max);
        }
    }
    if !any_fg {
        return Err(FcpError::Degenerate("support mask has no foreground pixel".into()));
    }
    Ok(best.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect())
}

/// Conventional pseudo-mask for one support shot, rescaled from `[-1, 1]` to `[0, 1]`.
pub fn conventional_pseudo_mask(fq: &FeatureMap, fs: &FeatureMap, ms: &Mask) -> Result<Mask> {
    conventional_pseudo_mask_multi(fq, &[(fs, ms)])
}

/// K-shot form: the maximum runs over every shot's foreground pixels.
pub fn conventional_pseudo_mask_multi(fq: &FeatureMap, supports: &[(&FeatureMap, &Mask)]) -> Result<Mask> {
    let raw = conventional_similarity(fq, supports)?;
    Mask::soft(fq.height, fq.width, raw.into_iter().map(|x| (x + 1.0) / 2.0).collect())
}

/// Divide by the maximum; an all-zero map stays all-zero.
pub fn normalize_mask(height: usize, width: usize, raw: &[f64]) -> Result<Mask> {
    if let Some(v) = raw.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(FcpError::Contract(format!("cannot max-normalize value {v}")));
    }
    let mx = raw.iter().copied().fold(0.0, f64::max);
    if mx == 0.0 {
        return Mask::soft(height, width, vec![0.0; raw.len()]);
    }
    Mask::soft(height, width, raw.iter().map(|&v| v / mx).collect())
}

/// Per-pixel max over tokens of `N × HW` attention weights, before normalization.
pub fn max_over_tokens(weights: &[f64], tokens: usize) -> Result<Vec<f64>> {
    if tokens == 0 || weights.len() % tokens != 0 {
        return dim_err(
            "attention_mask",
            format!("{} weights for {tokens} tokens", weights.len()),
        );
    }
    let hw = weights.len() / tokens;
    let mut out = vec![f64::NEG_INFINITY; hw];
    for row in weights.chunks_exact(hw) {
        for (o, &w) in out.iter_mut().zip(row) {
            *o = o.max(w);
        }
    }
    Ok(out)
}

/// Attention-based pseudo-mask from `N × HW` attention weights.
pub fn attention_mask_from_weights(weights: &[f64], tokens: usize, height: usize, width: usize) -> Result<Mask> {
    let raw = max_over_tokens(weights, tokens)?;
    if raw.len() != height * width {
        return dim_err(
            "attention_mask",
            format!("{} pixels for a {height}x{width} grid", raw.len()),
        );
    }
    normalize_mask(height, width, &raw)
}

/// Differentiable attention-based pseudo-mask, `1 × HW`.
pub fn attention_mask_tensor<'g>(weights: &Tensor<'g>) -> Result<Tensor<'g>> {
    weights.max_over_rows()?.normalize_max()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaskMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    match (num, den) {
        (0, 0) => 1.0,
        (_, 0) => 0.0,
        _ => num as f64 / den as f64,
    }
}

/// Binarize `pred` at `threshold` and compare with a binary `gt`.
/// Empty-denominator convention: 0/0 → 1, x/0 → 0.
pub fn mask_metrics(pred: &Mask, gt: &Mask, threshold: f64) -> Result<MaskMetrics> {
    if !pred.same_shape(gt) {
        return dim_err(
            "mask_metrics",
            format!("{}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width),
        );
    }
    if !gt.is_binary() {
        return Err(FcpError::Contract("ground-truth mask must be binary".into()));
    }
    let (mut inter, mut npred, mut ngt) = (0, 0, 0);
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        let p = p >= threshold;
        let g = g == 1.0;
        inter += (p && g) as usize;
        npred += p as usize;
        ngt += g as usize;
    }
    let union = npred + ngt - inter;
    Ok(MaskMetrics {
        iou: ratio(inter, union),
        precision: ratio(inter, npred),
        recall: ratio(inter, ngt),
    })
}
