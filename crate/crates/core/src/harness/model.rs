//! The full few-shot segmenter: prototype generation, matching, decoding and
//! the training objective, over a flat parameter list.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, Variant};
use super::episode::EpisodeImage;
use crate::autodiff::{concat_rows, grad_check, GradCheckConfig, GradCheckReport, Graph, Parameter, Tensor};
use crate::decode::{decode_mask, generate_vrp, prototype_pixel_vrp, DecoderParams};
use crate::error::{FcpError, Result};
use crate::losses::{guide_loss, ortho_loss_sides, prompt_loss, total_loss, LossConfig};
use crate::params::{check_layout, init_parameters, Cursor, ParamSpec};
use crate::protogen::{
    build_query_prototypes, build_support_prototypes, guide_query_backbone, guide_query_sam, AttentionRecord,
    ProtoParams, QueryGuide, Shot,
};
use crate::pseudomask::Mask;

/// Stream tag mixed into the seed for parameter initialisation.
const INIT_STREAM: u64 = 0x1A17;

pub fn model_layout(cfg: &RunConfig) -> Vec<ParamSpec> {
    let mut specs = cfg.proto().layout();
    specs.extend(cfg.decoder().layout());
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: RunConfig,
    pub params: Vec<Parameter>,
}

impl Model {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM.rotate_left(40));
        let params = init_parameters(&model_layout(cfg), &mut rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn from_parameters(cfg: RunConfig, params: Vec<Parameter>) -> Result<Self> {
        cfg.validate()?;
        check_layout(&model_layout(&cfg), &params)?;
        Ok(Model { cfg, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }
}

/// Model parameters bound to one graph.
pub struct Bound<'g> {
    pub proto: ProtoParams<'g>,
    pub decoder: DecoderParams<'g>,
}

impl<'g> Bound<'g> {
    /// Interpret `tensors` (in layout order) as model parameters.
    pub fn read(cfg: &RunConfig, tensors: &[Tensor<'g>]) -> Result<Self> {
        let mut cur = Cursor::new(tensors);
        let proto = ProtoParams::read(&cfg.proto(), &mut cur)?;
        let decoder = DecoderParams::read(&cfg.decoder(), &mut cur)?;
        if cur.remaining() != 0 {
            return Err(FcpError::Config(format!(
                "{} unused parameter tensors",
                cur.remaining()
            )));
        }
        Ok(Bound { proto, decoder })
    }
}

pub struct Forward<'g> {
    /// Soft predicted query mask, `1 × HW`.
    pub pred: Tensor<'g>,
    /// Reference prompts, `K·N × C`.
    pub prompts: Tensor<'g>,
    pub support_records: Vec<AttentionRecord<'g>>,
    /// Empty for the prototype-pixel variant.
    pub query_records: Vec<AttentionRecord<'g>>,
    /// Attention-based query masks for steps `1..T`; empty for the prototype-pixel variant.
    pub attention_masks: Vec<Tensor<'g>>,
    pub pseudo: Mask,
}

pub fn forward<'g>(
    g: &'g Graph,
    bound: &Bound<'g>,
    shots: &[Shot<'_>],
    query: &EpisodeImage,
    variant: Variant,
) -> Result<Forward<'g>> {
    let proto = &bound.proto;
    let mut support_tokens = Vec::with_capacity(shots.len());
    let mut support_records = Vec::new();
    for shot in shots {
        let (t, recs) = build_support_prototypes(g, *shot, proto)?;
        support_tokens.push(t);
        support_records.extend(recs);
    }
    let p_s = concat_rows(&support_tokens)?;
    let g_q = query.sam.to_tensor(g)?;

    let (prompts, query_records, attention_masks, pseudo) = match variant {
        Variant::PrototypePixel => {
            let (g_bar, pseudo) = guide_query_sam(g, &query.sam, &query.backbone, shots, proto)?;
            let f_bar = guide_query_backbone(g, &query.backbone, &pseudo.to_tensor(g)?, shots, proto)?;
            let (v, _) = prototype_pixel_vrp(&p_s, &f_bar, &g_bar, &bound.decoder.matching)?;
            (v, Vec::new(), Vec::new(), pseudo)
        }
        Variant::ConventionalGuide | Variant::Full => {
            let guide = if variant == Variant::Full {
                QueryGuide::Attention
            } else {
                QueryGuide::Conventional
            };
            let qp = build_query_prototypes(g, &query.sam, &query.backbone, shots, proto, guide)?;
            let (v, _) = generate_vrp(&p_s, &qp.tokens, &bound.decoder.matching)?;
            (v, qp.records, qp.attention_masks, qp.pseudo)
        }
    };
    let pred = decode_mask(&prompts, &g_q, &bound.decoder)?;
    Ok(Forward {
        pred,
        prompts,
        support_records,
        query_records,
        attention_masks,
        pseudo,
    })
}

pub struct LossTerms<'g> {
    pub total: Tensor<'g>,
    pub prompt: Tensor<'g>,
    pub guide: Option<Tensor<'g>>,
    pub ortho: Option<Tensor<'g>>,
}

/// Training objective for one episode. Terms with zero weight are skipped;
/// without query records only the support side enters the overlap penalty
/// and the guide term is dropped.
pub fn episode_loss<'g>(
    g: &'g Graph,
    fwd: &Forward<'g>,
    gt: &Mask,
    cfg: &LossConfig,
    steps: usize,
) -> Result<LossTerms<'g>> {
    let gt_t = gt.to_tensor(g)?;
    let prompt = prompt_loss(&fwd.pred, &gt_t, cfg.eps)?;
    let mut eff = cfg.clone();
    let guide = if cfg.lambda_guide > 0.0 && !fwd.attention_masks.is_empty() {
        Some(guide_loss(&fwd.attention_masks, &gt_t, cfg.eps)?)
    } else {
        eff.lambda_guide = 0.0;
        None
    };
    let ortho = if cfg.lambda_ortho > 0.0 {
        let mut sides: Vec<&[AttentionRecord<'g>]> = vec![&fwd.support_records];
        if !fwd.query_records.is_empty() {
            sides.push(&fwd.query_records);
        }
        Some(ortho_loss_sides(&sides, steps, cfg.ortho_includes_final)?)
    } else {
        None
    };
    let total = total_loss(&prompt, guide.as_ref(), ortho.as_ref(), &eff)?;
    Ok(LossTerms {
        total,
        prompt,
        guide,
        ortho,
    })
}

/// Total training loss of one episode as a function of bound parameters.
pub fn pipeline_loss<'g>(
    g: &'g Graph,
    tensors: &[Tensor<'g>],
    cfg: &RunConfig,
    shots: &[Shot<'_>],
    query: &EpisodeImage,
) -> Result<Tensor<'g>> {
    let bound = Bound::read(cfg, tensors)?;
    let fwd = forward(g, &bound, shots, query, cfg.variant)?;
    Ok(episode_loss(g, &fwd, &query.mask, &cfg.loss(), cfg.steps)?.total)
}

/// Finite-difference check of every parameter group of `model` on one episode.
pub fn check_pipeline_gradients(
    model: &Model,
    episode: &super::episode::Episode,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let shots = episode.shots();
    grad_check(
        |g, ts| pipeline_loss(g, ts, &model.cfg, &shots, &episode.query),
        &model.params,
        gc,
    )
}
