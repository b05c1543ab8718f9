//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::decode::DecoderConfig;
use crate::error::{FcpError, Result};
use crate::losses::LossConfig;
use crate::protogen::ProtoConfig;
use crate::synth::DatasetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Support prototypes matched directly against query pixels.
    PrototypePixel,
    /// Query prototypes, backbone-like map guided by the cosine pseudo-mask.
    ConventionalGuide,
    /// Query prototypes guided by the attention-based mask.
    Full,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::PrototypePixel => "prototype-pixel",
            Variant::ConventionalGuide => "conventional",
            Variant::Full => "full",
        }
    }
}

impl FromStr for Variant {
    type Err = FcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype-pixel" => Ok(Variant::PrototypePixel),
            "conventional" => Ok(Variant::ConventionalGuide),
            "full" => Ok(Variant::Full),
            _ => Err(FcpError::Config(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub base_classes: u32,
    pub novel_classes: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_sam: f64,
    pub sigma_img: f64,
    pub sigma_pix: f64,
    pub dataset_seed: u64,
    pub tokens: usize,
    pub steps: usize,
    pub hidden: usize,
    pub decoder_temperature: f64,
    pub shared_projections: bool,
    pub residual: bool,
    pub qk_gain: f64,
    pub match_qk_gain: f64,
    pub variant: Variant,
    pub lr: f64,
    pub train_steps: usize,
    pub batch: usize,
    pub shots: usize,
    pub lambda_ortho: f64,
    pub lambda_guide: f64,
    pub eps: f64,
    pub ortho_includes_final: bool,
    pub weight_decay: f64,
    /// Parameter initialisation and training-episode stream.
    pub seed: u64,
    /// Evaluation-episode stream, shared across seeds and variants.
    pub eval_seed: u64,
    pub eval_episodes: usize,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base_classes: 12,
            novel_classes: 4,
            channels: 64,
            height: 32,
            width: 32,
            sigma_sam: 0.1,
            sigma_img: 0.3,
            sigma_pix: 0.5,
            dataset_seed: 0,
            tokens: 8,
            steps: 3,
            hidden: 16,
            decoder_temperature: 0.125,
            shared_projections: false,
            residual: true,
            qk_gain: 8.0,
            match_qk_gain: 1.0,
            variant: Variant::Full,
            lr: 1e-3,
            train_steps: 2000,
            batch: 1,
            shots: 1,
            lambda_ortho: 0.05,
            lambda_guide: 0.5,
            eps: 1e-7,
            ortho_includes_final: false,
            weight_decay: 1e-4,
            seed: 0,
            eval_seed: 1_000_003,
            eval_episodes: 1000,
            threshold: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| FcpError::Config(format!("bad value '{v}' for key '{key}'")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(FcpError::Config(format!(
                "steps must be at least 2, got {}",
                self.steps
            )));
        }
        if self.tokens == 0 || self.hidden == 0 || self.batch == 0 || self.shots == 0 {
            return Err(FcpError::Config(
                "tokens, hidden, batch and shots must be positive".into(),
            ));
        }
        if !(self.qk_gain > 0.0 && self.qk_gain.is_finite()) {
            return Err(FcpError::Config("qk_gain must be positive".into()));
        }
        if !(self.decoder_temperature > 0.0 && self.decoder_temperature.is_finite()) {
            return Err(FcpError::Config("decoder_temperature must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(FcpError::Config("eval_episodes must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(FcpError::Config(
                "lr must be positive and weight_decay nonnegative".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(FcpError::Config("threshold must lie in (0, 1)".into()));
        }
        self.loss().validate()
    }

    pub fn dataset(&self) -> DatasetConfig {
        let mut d = DatasetConfig::with_split(self.base_classes, self.novel_classes);
        d.channels = self.channels;
        d.height = self.height;
        d.width = self.width;
        d.sigma_sam = self.sigma_sam;
        d.sigma_img = self.sigma_img;
        d.sigma_pix = self.sigma_pix;
        d.seed = self.dataset_seed;
        d
    }

    pub fn proto(&self) -> ProtoConfig {
        ProtoConfig {
            tokens: self.tokens,
            channels: self.channels,
            steps: self.steps,
            shared_projections: self.shared_projections,
            residual: self.residual,
            qk_gain: self.qk_gain,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            tokens: self.tokens,
            channels: self.channels,
            hidden: self.hidden,
            temperature: self.decoder_temperature,
            qk_gain: self.match_qk_gain,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_ortho: self.lambda_ortho,
            lambda_guide: self.lambda_guide,
            eps: self.eps,
            ortho_includes_final: self.ortho_includes_final,
        }
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "base_classes" => self.base_classes = parse(key, v)?,
            "novel_classes" => self.novel_classes = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "sigma_sam" => self.sigma_sam = parse(key, v)?,
            "sigma_img" => self.sigma_img = parse(key, v)?,
            "sigma_pix" => self.sigma_pix = parse(key, v)?,
            "dataset_seed" => self.dataset_seed = parse(key, v)?,
            "tokens" => self.tokens = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "decoder_temperature" => self.decoder_temperature = parse(key, v)?,
            "shared_projections" => self.shared_projections = parse(key, v)?,
            "residual" => self.residual = parse(key, v)?,
            "qk_gain" => self.qk_gain = parse(key, v)?,
            "match_qk_gain" => self.match_qk_gain = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "shots" => self.shots = parse(key, v)?,
            "lambda_ortho" => self.lambda_ortho = parse(key, v)?,
            "lambda_guide" => self.lambda_guide = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "ortho_includes_final" => self.ortho_includes_final = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            _ => return Err(FcpError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FcpError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| FcpError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key, one per line, in a form [`RunConfig::parse`] reads back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("base_classes", self.base_classes.to_string());
        put("novel_classes", self.novel_classes.to_string());
        put("channels", self.channels.to_string());
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("sigma_sam", format!("{:?}", self.sigma_sam));
        put("sigma_img", format!("{:?}", self.sigma_img));
        put("sigma_pix", format!("{:?}", self.sigma_pix));
        put("dataset_seed", self.dataset_seed.to_string());
        put("tokens", self.tokens.to_string());
        put("steps", self.steps.to_string());
        put("hidden", self.hidden.to_string());
        put("decoder_temperature", format!("{:?}", self.decoder_temperature));
        put("shared_projections", self.shared_projections.to_string());
        put("residual", self.residual.to_string());
        put("qk_gain", format!("{:?}", self.qk_gain));
        put("match_qk_gain", format!("{:?}", self.match_qk_gain));
        put("variant", self.variant.as_str().to_string());
        put("lr", format!("{:?}", self.lr));
        put("train_steps", self.train_steps.to_string());
        put("batch", self.batch.to_string());
        put("shots", self.shots.to_string());
        put("lambda_ortho", format!("{:?}", self.lambda_ortho));
        put("lambda_guide", format!("{:?}", self.lambda_guide));
        put("eps", format!("{:?}", self.eps));
        put("ortho_includes_final", self.ortho_includes_final.to_string());
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("seed", self.seed.to_string());
        put("eval_seed", self.eval_seed.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        put("threshold", format!("{:?}", self.threshold));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.lr = 3.3e-4;
        c.variant = Variant::ConventionalGuide;
        c.sigma_pix = 0.1 + 0.2;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::parse("# header\n tokens = 4  # fewer\n\nsteps=4\n").unwrap();
        assert_eq!((c.tokens, c.steps), (4, 4));
        assert!(RunConfig::parse("tokens 4").is_err());
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("steps = 1").is_err());
        assert!(RunConfig::parse("lr = abc").is_err());
    }
}
