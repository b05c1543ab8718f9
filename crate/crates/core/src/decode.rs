//! Prototype-to-prototype matching into reference prompts, and the small
//! trainable mask decoder that turns prompts plus query features into a mask.

use crate::autodiff::Tensor;
use crate::error::{dim_err, Result};
use crate::params::{affine_specs, identity_specs, Affine, Cursor, ParamSpec};
use crate::protogen::{cross_attention_step, Projection};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Similarity-map channels seen by the head (tokens per support shot).
    pub tokens: usize,
    pub channels: usize,
    pub hidden: usize,
    /// Divisor applied to prompt-pixel dot products.
    pub temperature: f64,
    /// Initial gain of the matching query and key projections.
    pub qk_gain: f64,
}

impl DecoderConfig {
    pub fn new(tokens: usize, channels: usize) -> Self {
        DecoderConfig {
            tokens,
            channels,
            hidden: 16,
            temperature: 1.0,
            qk_gain: 1.0,
        }
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        let mut specs = Vec::new();
        for (p, gain) in [("q", self.qk_gain), ("k", self.qk_gain), ("v", 1.0)] {
            specs.extend(identity_specs(&format!("match.{p}"), c, gain));
        }
        specs.extend(identity_specs("decoder.prompt", c, 1.0));
        specs.extend(identity_specs("decoder.pixel", c, 1.0));
        specs.extend(affine_specs("decoder.head1", self.hidden, self.tokens));
        specs.extend(affine_specs("decoder.head2", 1, self.hidden));
        specs
    }
}

pub struct DecoderParams<'g> {
    pub cfg: DecoderConfig,
    /// Projections of the matching cross-attention.
    pub matching: Projection<'g>,
    pub prompt: Affine<'g>,
    pub pixel: Affine<'g>,
    pub head1: Affine<'g>,
    pub head2: Affine<'g>,
}

impl<'g> DecoderParams<'g> {
    pub fn read(cfg: &DecoderConfig, cur: &mut Cursor<'_, 'g>) -> Result<Self> {
        let c = cfg.channels;
        Ok(DecoderParams {
            cfg: cfg.clone(),
            matching: Projection::read(cur, c)?,
            prompt: Affine::read(cur, c, c)?,
            pixel: Affine::read(cur, c, c)?,
            head1: Affine::read(cur, cfg.hidden, cfg.tokens)?,
            head2: Affine::read(cur, 1, cfg.hidden)?,
        })
    }
}

/// Support prototypes attend over query prototypes (keys and values).
/// Returns prompts `V` (one row per support prototype) and the `Ns × Nq` weights.
pub fn generate_vrp<'g>(p_s: &Tensor<'g>, p_q: &Tensor<'g>, proj: &Projection<'g>) -> Result<(Tensor<'g>, Tensor<'g>)> {
    let (ss, qs) = (p_s.shape(), p_q.shape());
    if ss.len() != 2 || qs.len() != 2 || ss[1] != qs[1] {
        return dim_err("generate_vrp", format!("support {ss:?} vs query {qs:?}"));
    }
    let c = ss[1] as f64;
    let q = proj.q.rows(p_s)?;
    let k = proj.k.rows(p_q)?;
    let v = proj.v.rows(p_q)?;
    let weights = q.matmul(&k.transpose()?)?.softmax_rows(c.sqrt(), None)?;
    Ok((weights.matmul(&v)?, weights))
}

/// Baseline matching: support prototypes attend directly over query pixels.
/// `keys` and `values` are `C × HW` maps.
pub fn prototype_pixel_vrp<'g>(
    p_s: &Tensor<'g>,
    keys: &Tensor<'g>,
    values: &Tensor<'g>,
    proj: &Projection<'g>,
) -> Result<(Tensor<'g>, Tensor<'g>)> {
    cross_attention_step(p_s, keys, values, proj)
}

/// Decode prompts `v` (`K·N × C`) against query SAM-like features `g_q`
/// (`C × HW`) into a soft `1 × HW` mask. With `K > 1` shots the similarity
/// maps are averaged shot-wise so the head always sees `N` channels.
pub fn decode_mask<'g>(v: &Tensor<'g>, g_q: &Tensor<'g>, params: &DecoderParams<'g>) -> Result<Tensor<'g>> {
    let (vs, gs) = (v.shape(), g_q.shape());
    let n = params.cfg.tokens;
    if vs.len() != 2 || gs.len() != 2 || vs[1] != gs[0] || vs[0] == 0 || vs[0] % n != 0 {
        return dim_err(
            "decode_mask",
            format!("prompts {vs:?} vs features {gs:?} with {n} tokens per shot"),
        );
    }
    let shots = vs[0] / n;
    let prompts = params.prompt.rows(v)?;
    let pixels = params.pixel.pixels(g_q)?;
    let mut sim = prompts.matmul(&pixels)?.scale(1.0 / params.cfg.temperature);
    if shots > 1 {
        let mut avg = vec![0.0; n * n * shots];
        for i in 0..n {
            for s in 0..shots {
                avg[i * n * shots + s * n + i] = 1.0 / shots as f64;
            }
        }
        sim = v.graph().constant(avg, &[n, n * shots])?.matmul(&sim)?;
    }
    let hidden = params.head1.pixels(&sim)?.relu();
    Ok(params.head2.pixels(&hidden)?.sigmoid())
}
