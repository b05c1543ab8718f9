use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::episode::{sample_episode, Episode};
use super::model::{forward, Bound, Model};
use crate::autodiff::Graph;
use crate::error::{FcpError, Result};
use crate::params::bind;
use crate::pseudomask::{mask_metrics, Mask, MaskMetrics};
use crate::synth::{make_dataset, DatasetSpec, Phase};

/// What a predictor produces for one episode.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Soft predicted query mask.
    pub mask: Mask,
    /// Conventional pseudo-mask, if the predictor computes one.
    pub conventional: Option<Mask>,
    /// Attention-based pseudo-mask used for guiding, if any.
    pub attention: Option<Mask>,
}

pub trait Predictor {
    fn predict(&mut self, episode: &Episode) -> Result<Prediction>;
}

impl Predictor for Model {
    fn predict(&mut self, episode: &Episode) -> Result<Prediction> {
        let g = Graph::no_grad();
        let tensors = bind(&g, &self.params)?;
        let bound = Bound::read(&self.cfg, &tensors)?;
        let fwd = forward(&g, &bound, &episode.shots(), &episode.query, self.cfg.variant)?;
        let (h, w) = (episode.query.mask.height(), episode.query.mask.width());
        let attention = match fwd.attention_masks.last() {
            Some(t) => Some(Mask::from_tensor(t, h, w)?),
            None => None,
        };
        Ok(Prediction {
            mask: Mask::from_tensor(&fwd.pred, h, w)?,
            conventional: Some(fwd.pseudo),
            attention,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub index: usize,
    pub class: u32,
    pub prediction: MaskMetrics,
    pub conventional: Option<MaskMetrics>,
    pub attention: Option<MaskMetrics>,
    /// IoU of predicting foreground everywhere.
    pub constant_iou: f64,
}

impl EpisodeRecord {
    pub fn to_json(&self) -> String {
        let m = |x: &MaskMetrics| serde_json::json!({"iou": x.iou, "precision": x.precision, "recall": x.recall});
        serde_json::json!({
            "episode": self.index,
            "class": self.class,
            "prediction": m(&self.prediction),
            "conventional": self.conventional.as_ref().map(m),
            "attention": self.attention.as_ref().map(m),
            "constant_iou": self.constant_iou,
        })
        .to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub conventional_miou: Option<f64>,
    pub attention_miou: Option<f64>,
    pub constant_miou: f64,
    pub records: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "episodes": self.records.len(),
            "miou": self.miou,
            "conventional_miou": self.conventional_miou,
            "attention_miou": self.attention_miou,
            "constant_miou": self.constant_miou,
        })
        .to_string()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Streams novel-phase episodes from the `eval_seed` stream of `cfg`.
pub struct EvalEpisodes {
    dataset: DatasetSpec,
    rng: ChaCha8Rng,
    shots: usize,
    left: usize,
}

impl EvalEpisodes {
    pub fn new(cfg: &RunConfig, n: usize, k: usize) -> Result<Self> {
        Ok(EvalEpisodes {
            dataset: make_dataset(&cfg.dataset())?,
            rng: ChaCha8Rng::seed_from_u64(cfg.eval_seed),
            shots: k,
            left: n,
        })
    }
}

impl Iterator for EvalEpisodes {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        let ep = sample_episode(&self.dataset, Phase::Novel, self.shots, &mut self.rng);
        Some(ep.and_then(|ep| {
            if self.dataset.phase_of(ep.class) != Some(Phase::Novel) {
                return Err(FcpError::Contract(format!(
                    "evaluation drew non-novel class {}",
                    ep.class
                )));
            }
            Ok(ep)
        }))
    }
}

fn score<P: Predictor + ?Sized>(
    predictor: &mut P,
    index: usize,
    ep: &Episode,
    threshold: f64,
) -> Result<EpisodeRecord> {
    if ep.phase != Phase::Novel {
        return Err(FcpError::Contract(format!(
            "episode {index} is not a novel-phase episode"
        )));
    }
    let gt = &ep.query.mask;
    let p = predictor.predict(ep)?;
    let all = Mask::filled(gt.height(), gt.width(), 1.0)?;
    Ok(EpisodeRecord {
        index,
        class: ep.class,
        prediction: mask_metrics(&p.mask, gt, threshold)?,
        conventional: p
            .conventional
            .as_ref()
            .map(|m| mask_metrics(m, gt, threshold))
            .transpose()?,
        attention: p
            .attention
            .as_ref()
            .map(|m| mask_metrics(m, gt, threshold))
            .transpose()?,
        constant_iou: mask_metrics(&all, gt, threshold)?.iou,
    })
}

fn report(records: Vec<EpisodeRecord>) -> Result<EvalReport> {
    let miou = mean(records.iter().map(|r| r.prediction.iou))
        .ok_or_else(|| FcpError::Contract("evaluation needs at least one episode".into()))?;
    Ok(EvalReport {
        miou,
        conventional_miou: mean(records.iter().filter_map(|r| r.conventional.map(|m| m.iou))),
        attention_miou: mean(records.iter().filter_map(|r| r.attention.map(|m| m.iou))),
        constant_miou: mean(records.iter().map(|r| r.constant_iou)).expect("nonempty"),
        records,
    })
}

/// Score a predictor on episodes. Masks are binarized at `threshold`.
pub fn evaluate_episodes<P, I>(predictor: &mut P, episodes: I, threshold: f64) -> Result<EvalReport>
where
    P: Predictor + ?Sized,
    I: IntoIterator<Item = Result<Episode>>,
{
    let mut records = Vec::new();
    for (index, ep) in episodes.into_iter().enumerate() {
        records.push(score(predictor, index, &ep?, threshold)?);
    }
    report(records)
}

/// Evaluate a model on `n` novel episodes with `k` shots.
pub fn evaluate(model: &Model, n: usize, k: usize) -> Result<EvalReport> {
    let mut m = model.clone();
    evaluate_episodes(&mut m, EvalEpisodes::new(&model.cfg, n, k)?, model.cfg.threshold)
}
