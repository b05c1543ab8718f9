//! Segmentation and attention losses over graph tensors.
//!
//! Mask arguments are `1 × HW` (or any equal-shape) tensors with values in `[0, 1]`.

use crate::autodiff::Tensor;
use crate::error::{dim_err, FcpError, Result};
use crate::protogen::AttentionRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_ortho: f64,
    pub lambda_guide: f64,
    /// Predictions are clamped to `[eps, 1 - eps]` before logarithms.
    pub eps: f64,
    /// Also penalise overlap in the final (step `T`) attention maps.
    pub ortho_includes_final: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ortho: 0.05,
            lambda_guide: 0.5,
            eps: 1e-7,
            ortho_includes_final: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ortho >= 0.0 && self.lambda_guide >= 0.0) {
            return Err(FcpError::Config("loss weights must be nonnegative".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(FcpError::Config(format!("eps must lie in (0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor<'_>, b: &Tensor<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean binary cross-entropy with clamped predictions.
pub fn bce_loss<'g>(pred: &Tensor<'g>, gt: &Tensor<'g>, eps: f64) -> Result<Tensor<'g>> {
    same_shape("bce_loss", pred, gt)?;
    let p = pred.clamp(eps, 1.0 - eps);
    let pos = gt.mul(&p.ln())?;
    let neg = gt.rsub_scalar(1.0).mul(&p.rsub_scalar(1.0).ln())?;
    Ok(pos.add(&neg)?.mean().scale(-1.0))
}

/// `1 − 2Σgp / (Σg² + Σp²)`, and 0 when both masks are empty.
pub fn dice_loss<'g>(pred: &Tensor<'g>, gt: &Tensor<'g>) -> Result<Tensor<'g>> {
    same_shape("dice_loss", pred, gt)?;
    let den = gt.mul(gt)?.sum().add(&pred.mul(pred)?.sum())?;
    if den.item() == 0.0 {
        return Ok(pred.graph().scalar(0.0));
    }
    let num = gt.mul(pred)?.sum().scale(2.0);
    Ok(num.div(&den)?.rsub_scalar(1.0))
}

/// BCE + dice of the predicted mask against ground truth.
pub fn prompt_loss<'g>(pred: &Tensor<'g>, gt: &Tensor<'g>, eps: f64) -> Result<Tensor<'g>> {
    bce_loss(pred, gt, eps)?.add(&dice_loss(pred, gt)?)
}

/// Mean over the attention-based masks of BCE + dice against ground truth.
pub fn guide_loss<'g>(attn_masks: &[Tensor<'g>], gt: &Tensor<'g>, eps: f64) -> Result<Tensor<'g>> {
    let mut total: Option<Tensor<'g>> = None;
    for m in attn_masks {
        let term = prompt_loss(m, gt, eps)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| FcpError::Contract("guide loss needs at least one mask".into()))?;
    Ok(total.scale(1.0 / attn_masks.len() as f64))
}

/// Σ over ordered pairs `i ≠ j` of cosine similarity between rows of `weights`.
pub fn pairwise_cosine_sum<'g>(weights: &Tensor<'g>) -> Result<Tensor<'g>> {
    let shape = weights.shape();
    if shape.len() != 2 {
        return dim_err("ortho_loss", format!("attention weights {shape:?}"));
    }
    let n = shape[0];
    let unit = weights
        .row_normalize()
        .map_err(|_| FcpError::Degenerate("cosine of an all-zero attention map".into()))?;
    let gram = unit.matmul(&unit.transpose()?)?;
    let off: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect();
    let off = weights.graph().constant(off, &[n, n])?;
    Ok(gram.mul(&off)?.sum())
}

/// Pairwise-overlap penalty on attention maps of both sides. Averaged over
/// the selected steps; records sharing a step and side (several support
/// shots) are averaged first.
pub fn ortho_loss<'g>(
    support: &[AttentionRecord<'g>],
    query: &[AttentionRecord<'g>],
    steps: usize,
    include_final: bool,
) -> Result<Tensor<'g>> {
    ortho_loss_sides(&[support, query], steps, include_final)
}

/// [`ortho_loss`] over any number of record groups.
pub fn ortho_loss_sides<'g>(sides: &[&[AttentionRecord<'g>]], steps: usize, include_final: bool) -> Result<Tensor<'g>> {
    let last = if include_final { steps } else { steps.saturating_sub(1) };
    if last == 0 || sides.is_empty() {
        return Err(FcpError::Contract(
            "ortho loss needs at least one step and one side".into(),
        ));
    }
    let mut total: Option<Tensor<'g>> = None;
    for t in 1..=last {
        for side in sides {
            let recs: Vec<_> = side.iter().filter(|r| r.step == t).collect();
            if recs.is_empty() {
                return Err(FcpError::Contract(format!("missing attention record for step {t}")));
            }
            let mut s: Option<Tensor<'g>> = None;
            for r in &recs {
                let term = pairwise_cosine_sum(&r.weights)?;
                s = Some(match s {
                    Some(x) => x.add(&term)?,
                    None => term,
                });
            }
            let s = s.expect("nonempty").scale(1.0 / recs.len() as f64);
            total = Some(match total {
                Some(x) => x.add(&s)?,
                None => s,
            });
        }
    }
    Ok(total.expect("at least one step").scale(1.0 / last as f64))
}

/// `prompt + λ_ortho·ortho + λ_guide·guide`; a term whose weight is zero may be `None`.
pub fn total_loss<'g>(
    prompt: &Tensor<'g>,
    guide: Option<&Tensor<'g>>,
    ortho: Option<&Tensor<'g>>,
    cfg: &LossConfig,
) -> Result<Tensor<'g>> {
    let mut total = *prompt;
    for (term, lambda, name) in [(ortho, cfg.lambda_ortho, "ortho"), (guide, cfg.lambda_guide, "guide")] {
        match term {
            Some(t) => total = total.add(&t.scale(lambda))?,
            None if lambda != 0.0 => {
                return Err(FcpError::Contract(format!(
                    "{name} loss weight is {lambda} but no term was given"
                )))
            }
            None => {}
        }
    }
    Ok(total)
}
