//! Support and query prototype construction: feature guiding followed by
//! `T` rounds of cross-attention from learnable tokens onto feature maps.

use crate::autodiff::{concat_rows, Graph, Tensor};
use crate::error::{dim_err, FcpError, Result};
use crate::params::{affine_specs, identity_specs, Affine, Cursor, Init, ParamSpec};
use crate::pseudomask::{attention_mask_tensor, conventional_pseudo_mask_multi, Mask};
use crate::synth::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoConfig {
    /// Learnable tokens per side (`N`).
    pub tokens: usize,
    pub channels: usize,
    /// Attention rounds per side (`T`).
    pub steps: usize,
    /// One projection triple per side reused at every step.
    pub shared_projections: bool,
    /// Add each attention output onto the incoming tokens.
    pub residual: bool,
    /// Initial gain of the query and key projections.
    pub qk_gain: f64,
}

impl ProtoConfig {
    pub fn new(tokens: usize, channels: usize, steps: usize) -> Self {
        ProtoConfig {
            tokens,
            channels,
            steps,
            shared_projections: false,
            residual: true,
            qk_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.channels == 0 {
            return Err(FcpError::Config("tokens and channels must be positive".into()));
        }
        if self.steps < 2 {
            return Err(FcpError::Config(format!(
                "need at least 2 attention steps for the query side, got {}",
                self.steps
            )));
        }
        Ok(())
    }

    fn triples(&self) -> usize {
        if self.shared_projections {
            1
        } else {
            self.steps
        }
    }

    /// Parameter layout in declaration order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let (n, c) = (self.tokens, self.channels);
        let tok = Init::Gaussian(1.0 / (c as f64).sqrt());
        let mut specs = vec![
            ParamSpec::new("tokens.support", &[n, c], tok),
            ParamSpec::new("tokens.query", &[n, c], tok),
        ];
        for side in [Side::Support, Side::Query] {
            for t in 1..=self.triples() {
                for (p, gain) in [("q", self.qk_gain), ("k", self.qk_gain), ("v", 1.0)] {
                    specs.extend(identity_specs(&format!("{}.{t}.{p}", side.as_str()), c, gain));
                }
            }
        }
        specs.extend(affine_specs("guide.sam", c, 2 * c + 1));
        specs.extend(affine_specs("guide.backbone", c, 2 * c + 1));
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Support,
    Query,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Support => "support",
            Side::Query => "query",
        }
    }
}

/// Query, key and value projections of one attention step.
#[derive(Clone, Copy)]
pub struct Projection<'g> {
    pub q: Affine<'g>,
    pub k: Affine<'g>,
    pub v: Affine<'g>,
}

impl<'g> Projection<'g> {
    pub fn read(cur: &mut Cursor<'_, 'g>, c: usize) -> Result<Self> {
        Ok(Projection {
            q: Affine::read(cur, c, c)?,
            k: Affine::read(cur, c, c)?,
            v: Affine::read(cur, c, c)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuideConv {
    /// For SAM-like features.
    Sam,
    /// For backbone-like features.
    Backbone,
}

/// Prototype-generation parameters bound to one graph.
pub struct ProtoParams<'g> {
    pub cfg: ProtoConfig,
    pub tokens_support: Tensor<'g>,
    pub tokens_query: Tensor<'g>,
    pub support: Vec<Projection<'g>>,
    pub query: Vec<Projection<'g>>,
    pub conv_sam: Affine<'g>,
    pub conv_backbone: Affine<'g>,
}

impl<'g> ProtoParams<'g> {
    pub fn read(cfg: &ProtoConfig, cur: &mut Cursor<'_, 'g>) -> Result<Self> {
        cfg.validate()?;
        let (n, c) = (cfg.tokens, cfg.channels);
        let tokens_support = cur.next(&[n, c])?;
        let tokens_query = cur.next(&[n, c])?;
        let support = (0..cfg.triples())
            .map(|_| Projection::read(cur, c))
            .collect::<Result<_>>()?;
        let query = (0..cfg.triples())
            .map(|_| Projection::read(cur, c))
            .collect::<Result<_>>()?;
        Ok(ProtoParams {
            cfg: cfg.clone(),
            tokens_support,
            tokens_query,
            support,
            query,
            conv_sam: Affine::read(cur, c, 2 * c + 1)?,
            conv_backbone: Affine::read(cur, c, 2 * c + 1)?,
        })
    }

    /// Projections for 1-based step `t` on a side.
    pub fn projection(&self, side: Side, t: usize) -> &Projection<'g> {
        let bank = match side {
            Side::Support => &self.support,
            Side::Query => &self.query,
        };
        if self.cfg.shared_projections {
            &bank[0]
        } else {
            &bank[t - 1]
        }
    }

    pub fn conv(&self, which: GuideConv) -> &Affine<'g> {
        match which {
            GuideConv::Sam => &self.conv_sam,
            GuideConv::Backbone => &self.conv_backbone,
        }
    }
}

/// Attention weights of one step: `N × HW`, each row a distribution over pixels.
#[derive(Clone, Copy)]
pub struct AttentionRecord<'g> {
    pub step: usize,
    pub side: Side,
    pub weights: Tensor<'g>,
    pub height: usize,
    pub width: usize,
}

impl<'g> AttentionRecord<'g> {
    /// Max over tokens, max-normalized; `1 × HW`, differentiable.
    pub fn attention_mask(&self) -> Result<Tensor<'g>> {
        attention_mask_tensor(&self.weights)
    }

    pub fn attention_mask_values(&self) -> Result<Mask> {
        Mask::from_tensor(&self.attention_mask()?, self.height, self.width)
    }
}

/// One labelled support image.
#[derive(Clone, Copy)]
pub struct Shot<'a> {
    pub sam: &'a FeatureMap,
    pub backbone: &'a FeatureMap,
    pub mask: &'a Mask,
}

fn check_grid(op: &'static str, f: &FeatureMap, m: &Mask) -> Result<()> {
    if f.height != m.height() || f.width != m.width() {
        return dim_err(
            op,
            format!("features {}x{} vs mask {}x{}", f.height, f.width, m.height(), m.width()),
        );
    }
    Ok(())
}

/// Mask-weighted mean feature vector over one or more (features, mask) pairs.
pub fn mask_average_pool(pairs: &[(&FeatureMap, &Mask)]) -> Result<Vec<f64>> {
    let c = pairs
        .first()
        .ok_or_else(|| FcpError::Degenerate("mask pooling over no images".into()))?
        .0
        .channels;
    let mut acc = vec![0.0; c];
    let mut weight = 0.0;
    for (f, m) in pairs {
        check_grid("mask_average_pool", f, m)?;
        if f.channels != c {
            return dim_err("mask_average_pool", format!("channels {} vs {c}", f.channels));
        }
        let hw = f.pixels();
        for (p, &w) in m.values().iter().enumerate() {
            if w > 0.0 {
                weight += w;
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += w * f.values[k * hw + p];
                }
            }
        }
    }
    if weight <= 0.0 {
        return Err(FcpError::Degenerate("mask pooling with an empty mask".into()));
    }
    Ok(acc.into_iter().map(|a| a / weight).collect())
}

/// Pool under the mask and broadcast the pooled vector to every pixel.
pub fn mask_average_pool_expand(f: &FeatureMap, m: &Mask) -> Result<FeatureMap> {
    let pooled = mask_average_pool(&[(f, m)])?;
    let hw = f.pixels();
    let values = pooled.iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect();
    FeatureMap::new(f.channels, f.height, f.width, values)
}

/// `conv(features ⊕ mask ⊕ expand(pooled))`; `features` is `C × HW`,
/// `mask` is `1 × HW`, `pooled` has `C` entries.
pub fn guide_features<'g>(
    features: &Tensor<'g>,
    mask: &Tensor<'g>,
    pooled: &[f64],
    conv: &Affine<'g>,
) -> Result<Tensor<'g>> {
    let fs = features.shape();
    if fs.len() != 2 || mask.shape() != [1, fs[1]] || pooled.len() != fs[0] {
        return dim_err(
            "guide_features",
            format!("features {fs:?}, mask {:?}, pooled {}", mask.shape(), pooled.len()),
        );
    }
    let g = features.graph();
    let expanded = g.constant(pooled.to_vec(), &[fs[0], 1])?.broadcast_cols(fs[1])?;
    conv.pixels(&concat_rows(&[*features, *mask, expanded])?)
}

fn attend<'g>(
    tokens: &Tensor<'g>,
    keys: &Tensor<'g>,
    values: &Tensor<'g>,
    mask: Option<&[bool]>,
    proj: &Projection<'g>,
) -> Result<(Tensor<'g>, Tensor<'g>)> {
    let (ts, ks, vs) = (tokens.shape(), keys.shape(), values.shape());
    if ts.len() != 2 || ks.len() != 2 || vs != ks || ts[1] != ks[0] {
        return dim_err("cross_attention", format!("tokens {ts:?}, keys {ks:?}, values {vs:?}"));
    }
    let c = ts[1] as f64;
    let q = proj.q.rows(tokens)?;
    let k = proj.k.pixels(keys)?;
    let v = proj.v.pixels(values)?;
    let weights = q.matmul(&k)?.softmax_rows(c.sqrt(), mask)?;
    let out = weights.matmul(&v.transpose()?)?;
    Ok((out, weights))
}

/// Cross-attention restricted to foreground pixels of a binary mask.
/// `tokens` is `N × C`; `keys` and `values` are `C × HW`.
/// Returns the attended tokens (`N × C`) and the weights (`N × HW`).
pub fn masked_cross_attention_step<'g>(
    tokens: &Tensor<'g>,
    keys: &Tensor<'g>,
    values: &Tensor<'g>,
    mask: &Mask,
    proj: &Projection<'g>,
) -> Result<(Tensor<'g>, Tensor<'g>)> {
    if !mask.is_binary() {
        return Err(FcpError::Contract("masked attention needs a binary mask".into()));
    }
    if mask.foreground_count() == 0 {
        return Err(FcpError::Degenerate("masked attention over an empty mask".into()));
    }
    if keys.shape().get(1) != Some(&mask.pixels()) {
        return dim_err(
            "masked_cross_attention",
            format!("keys {:?} vs {} mask pixels", keys.shape(), mask.pixels()),
        );
    }
    attend(tokens, keys, values, Some(&mask.to_bools()), proj)
}

/// Unmasked cross-attention over every pixel.
pub fn cross_attention_step<'g>(
    tokens: &Tensor<'g>,
    keys: &Tensor<'g>,
    values: &Tensor<'g>,
    proj: &Projection<'g>,
) -> Result<(Tensor<'g>, Tensor<'g>)> {
    attend(tokens, keys, values, None, proj)
}

fn advance<'g>(prev: &Tensor<'g>, out: Tensor<'g>, residual: bool) -> Result<Tensor<'g>> {
    if residual {
        prev.add(&out)
    } else {
        Ok(out)
    }
}

/// Support prototypes for one shot. `T − 1` masked steps take values from the
/// guided SAM-like map, the last from the guided backbone-like map.
pub fn build_support_prototypes<'g>(
    g: &'g Graph,
    shot: Shot<'_>,
    params: &ProtoParams<'g>,
) -> Result<(Tensor<'g>, Vec<AttentionRecord<'g>>)> {
    build_support_steps(g, shot, params, params.cfg.steps)
}

/// As [`build_support_prototypes`] with an explicit step count; `steps = 1`
/// runs only the backbone-valued step.
pub fn build_support_steps<'g>(
    g: &'g Graph,
    shot: Shot<'_>,
    params: &ProtoParams<'g>,
    steps: usize,
) -> Result<(Tensor<'g>, Vec<AttentionRecord<'g>>)> {
    if steps == 0 || steps > params.cfg.steps {
        return Err(FcpError::Contract(format!(
            "support steps must be in 1..={}, got {steps}",
            params.cfg.steps
        )));
    }
    check_grid("build_support_prototypes", shot.sam, shot.mask)?;
    check_grid("build_support_prototypes", shot.backbone, shot.mask)?;
    let (h, w) = (shot.mask.height(), shot.mask.width());
    let m = shot.mask.to_tensor(g)?;
    let g_bar = guide_features(
        &shot.sam.to_tensor(g)?,
        &m,
        &mask_average_pool(&[(shot.sam, shot.mask)])?,
        params.conv(GuideConv::Sam),
    )?;
    let mut tokens = params.tokens_support;
    let mut records = Vec::with_capacity(steps);
    let record = |step, weights| AttentionRecord {
        step,
        side: Side::Support,
        weights,
        height: h,
        width: w,
    };
    for t in 1..steps {
        let (out, a) =
            masked_cross_attention_step(&tokens, &g_bar, &g_bar, shot.mask, params.projection(Side::Support, t))?;
        tokens = advance(&tokens, out, params.cfg.residual)?;
        records.push(record(t, a));
    }
    let f_bar = guide_features(
        &shot.backbone.to_tensor(g)?,
        &m,
        &mask_average_pool(&[(shot.backbone, shot.mask)])?,
        params.conv(GuideConv::Backbone),
    )?;
    let (out, a) = masked_cross_attention_step(
        &tokens,
        &g_bar,
        &f_bar,
        shot.mask,
        params.projection(Side::Support, steps),
    )?;
    tokens = advance(&tokens, out, params.cfg.residual)?;
    records.push(record(steps, a));
    Ok((tokens, records))
}

/// Which mask guides the query backbone-like features before the last step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryGuide {
    /// Attention-based mask from step `T − 1`.
    Attention,
    /// Conventional cosine pseudo-mask.
    Conventional,
}

pub struct QueryPrototypes<'g> {
    /// `N × C`
    pub tokens: Tensor<'g>,
    /// Steps `1..=T`.
    pub records: Vec<AttentionRecord<'g>>,
    /// Attention-based masks for steps `1..T`, each `1 × HW`.
    pub attention_masks: Vec<Tensor<'g>>,
    /// Conventional pseudo-mask, rescaled to `[0, 1]`.
    pub pseudo: Mask,
    /// Guided SAM-like query features, `C × HW`.
    pub g_bar: Tensor<'g>,
}

fn sam_pairs<'a>(shots: &[Shot<'a>]) -> Vec<(&'a FeatureMap, &'a Mask)> {
    shots.iter().map(|s| (s.sam, s.mask)).collect()
}

fn backbone_pairs<'a>(shots: &[Shot<'a>]) -> Vec<(&'a FeatureMap, &'a Mask)> {
    shots.iter().map(|s| (s.backbone, s.mask)).collect()
}

/// Guided query SAM-like features: pseudo-mask channel plus support-pooled
/// expansion. Returns the guided map and the pseudo-mask.
pub fn guide_query_sam<'g>(
    g: &'g Graph,
    g_q: &FeatureMap,
    f_q: &FeatureMap,
    shots: &[Shot<'_>],
    params: &ProtoParams<'g>,
) -> Result<(Tensor<'g>, Mask)> {
    if shots.is_empty() {
        return Err(FcpError::Contract(
            "query prototypes need at least one support shot".into(),
        ));
    }
    if !g_q.same_grid(f_q) {
        return dim_err("build_query_prototypes", "query feature grids differ");
    }
    let pseudo = conventional_pseudo_mask_multi(f_q, &backbone_pairs(shots))?;
    let g_bar = guide_features(
        &g_q.to_tensor(g)?,
        &pseudo.to_tensor(g)?,
        &mask_average_pool(&sam_pairs(shots))?,
        params.conv(GuideConv::Sam),
    )?;
    Ok((g_bar, pseudo))
}

/// Guided query backbone-like features under an arbitrary `1 × HW` mask tensor.
pub fn guide_query_backbone<'g>(
    g: &'g Graph,
    f_q: &FeatureMap,
    mask: &Tensor<'g>,
    shots: &[Shot<'_>],
    params: &ProtoParams<'g>,
) -> Result<Tensor<'g>> {
    guide_features(
        &f_q.to_tensor(g)?,
        mask,
        &mask_average_pool(&backbone_pairs(shots))?,
        params.conv(GuideConv::Backbone),
    )
}

/// Query prototypes. Pooled expansions come from the support shots; the
/// backbone-like map is guided by `guide` before the final step.
pub fn build_query_prototypes<'g>(
    g: &'g Graph,
    g_q: &FeatureMap,
    f_q: &FeatureMap,
    shots: &[Shot<'_>],
    params: &ProtoParams<'g>,
    guide: QueryGuide,
) -> Result<QueryPrototypes<'g>> {
    let steps = params.cfg.steps;
    let (g_bar, pseudo) = guide_query_sam(g, g_q, f_q, shots, params)?;
    let (h, w) = (g_q.height, g_q.width);
    let mut tokens = params.tokens_query;
    let mut records = Vec::with_capacity(steps);
    let mut attention_masks = Vec::with_capacity(steps - 1);
    for t in 1..steps {
        let (out, a) = cross_attention_step(&tokens, &g_bar, &g_bar, params.projection(Side::Query, t))?;
        tokens = advance(&tokens, out, params.cfg.residual)?;
        let rec = AttentionRecord {
            step: t,
            side: Side::Query,
            weights: a,
            height: h,
            width: w,
        };
        attention_masks.push(rec.attention_mask()?);
        records.push(rec);
    }
    let guide_mask = match guide {
        QueryGuide::Attention => *attention_masks.last().expect("steps >= 2"),
        QueryGuide::Conventional => pseudo.to_tensor(g)?,
    };
    let f_bar = guide_query_backbone(g, f_q, &guide_mask, shots, params)?;
    let (out, a) = cross_attention_step(&tokens, &g_bar, &f_bar, params.projection(Side::Query, steps))?;
    tokens = advance(&tokens, out, params.cfg.residual)?;
    records.push(AttentionRecord {
        step: steps,
        side: Side::Query,
        weights: a,
        height: h,
        width: w,
    });
    Ok(QueryPrototypes {
        tokens,
        records,
        attention_masks,
        pseudo,
        g_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{bind, init_parameters};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_counts() {
        let mut cfg = ProtoConfig::new(4, 8, 3);
        assert_eq!(cfg.layout().len(), 2 + 2 * 3 * 6 + 4);
        cfg.shared_projections = true;
        assert_eq!(cfg.layout().len(), 2 + 2 * 6 + 4);
        assert!(ProtoConfig::new(4, 8, 1).validate().is_err());
    }

    #[test]
    fn pooling_single_pixel_and_empty() {
        let f = FeatureMap::new(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = Mask::from_bools(1, 3, &[false, true, false]).unwrap();
        let e = mask_average_pool_expand(&f, &m).unwrap();
        assert_eq!(e.values, vec![2.0, 2.0, 2.0, 5.0, 5.0, 5.0]);
        let empty = Mask::from_bools(1, 3, &[false; 3]).unwrap();
        assert!(matches!(
            mask_average_pool_expand(&f, &empty),
            Err(FcpError::Degenerate(_))
        ));
    }

    #[test]
    fn params_read_back_in_order() {
        let cfg = ProtoConfig::new(3, 4, 3);
        let ps = init_parameters(&cfg.layout(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = Graph::new();
        let ts = bind(&g, &ps).unwrap();
        let mut cur = Cursor::new(&ts);
        let pp = ProtoParams::read(&cfg, &mut cur).unwrap();
        assert_eq!(cur.remaining(), 0);
        assert_eq!(pp.support.len(), 3);
        assert_eq!(pp.conv_backbone.weight.shape(), vec![4, 9]);
    }
}
