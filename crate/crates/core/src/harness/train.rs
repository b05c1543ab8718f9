use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::episode::sample_episode;
use super::model::{episode_loss, forward, Bound, Model};
use crate::autodiff::{cosine_lr, AdamW, Graph};
use crate::error::{FcpError, Result};
use crate::params::bind;
use crate::synth::{make_dataset, Phase};

const TRAIN_STREAM: u64 = 0x7EA1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub prompt: f64,
    pub guide: f64,
    pub ortho: f64,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "lr": self.lr,
            "loss": self.total,
            "prompt": self.prompt,
            "guide": self.guide,
            "ortho": self.ortho,
        })
        .to_string()
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub log: Vec<StepLog>,
}

impl TrainReport {
    /// Mean total loss over log entries `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let xs = &self.log[range];
        xs.iter().map(|l| l.total).sum::<f64>() / xs.len() as f64
    }
}

/// Train from a fresh initialisation. Each step log is also written as one
/// JSON line to `sink` when given.
pub fn train(cfg: &RunConfig, sink: Option<&mut dyn Write>) -> Result<TrainReport> {
    train_model(Model::init(cfg)?, sink)
}

/// Continue training `model` for `model.cfg.train_steps` steps.
pub fn train_model(mut model: Model, mut sink: Option<&mut dyn Write>) -> Result<TrainReport> {
    let cfg = model.cfg.clone();
    let dataset = make_dataset(&cfg.dataset())?;
    let loss_cfg = cfg.loss();
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM.rotate_left(32));
    let mut log = Vec::with_capacity(cfg.train_steps);

    for step in 0..cfg.train_steps {
        let g = Graph::new();
        let tensors = bind(&g, &model.params)?;
        let bound = Bound::read(&cfg, &tensors)?;
        let mut sums = [0.0f64; 3];
        let mut total = None;
        for _ in 0..cfg.batch {
            let ep = sample_episode(&dataset, Phase::Base, cfg.shots, &mut rng)?;
            let fwd = forward(&g, &bound, &ep.shots(), &ep.query, cfg.variant)?;
            let terms = episode_loss(&g, &fwd, &ep.query.mask, &loss_cfg, cfg.steps)?;
            sums[0] += terms.prompt.item();
            sums[1] += terms.guide.map_or(0.0, |t| t.item());
            sums[2] += terms.ortho.map_or(0.0, |t| t.item());
            total = Some(match total {
                None => terms.total,
                Some(t) => terms.total.add(&t)?,
            });
        }
        let b = cfg.batch as f64;
        let loss = total.expect("batch >= 1").scale(1.0 / b);
        let value = loss.item();
        if !value.is_finite() {
            return Err(FcpError::NonFinite {
                step,
                detail: format!(
                    "loss {value} (prompt {}, guide {}, ortho {})",
                    sums[0] / b,
                    sums[1] / b,
                    sums[2] / b
                ),
            });
        }
        loss.backward()?;
        let grads: Vec<Vec<f64>> = tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, gr)| gr.iter().any(|x| !x.is_finite()))
        {
            return Err(FcpError::NonFinite {
                step,
                detail: format!("gradient of {}", model.params[i].name),
            });
        }
        let lr = cosine_lr(step, cfg.train_steps, cfg.lr);
        opt.step(&mut model.params, &grads, lr)?;

        let entry = StepLog {
            step,
            lr,
            total: value,
            prompt: sums[0] / b,
            guide: sums[1] / b,
            ortho: sums[2] / b,
        };
        if let Some(w) = sink.as_deref_mut() {
            writeln!(w, "{}", entry.to_json())?;
        }
        log.push(entry);
    }
    Ok(TrainReport { model, log })
}
