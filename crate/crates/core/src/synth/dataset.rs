use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FcpError, Result};

pub type ClassId = u32;

/// Which class split an episode draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Base,
    Novel,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Novel => "novel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub base_classes: Vec<ClassId>,
    pub novel_classes: Vec<ClassId>,
    pub background: ClassId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Per-pixel noise on SAM-like features.
    pub sigma_sam: f64,
    /// Per-image perturbation of backbone-like features.
    pub sigma_img: f64,
    /// Per-pixel noise on backbone-like features.
    pub sigma_pix: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::with_split(12, 4)
    }
}

impl DatasetConfig {
    /// Classes `1..=n_base` are base, the next `n_novel` are novel, 0 is background.
    pub fn with_split(n_base: u32, n_novel: u32) -> Self {
        DatasetConfig {
            base_classes: (1..=n_base).collect(),
            novel_classes: (n_base + 1..=n_base + n_novel).collect(),
            background: 0,
            channels: 64,
            height: 32,
            width: 32,
            sigma_sam: 0.1,
            sigma_img: 0.3,
            sigma_pix: 0.5,
            seed: 0,
        }
    }

    pub fn noise_free(mut self) -> Self {
        self.sigma_sam = 0.0;
        self.sigma_img = 0.0;
        self.sigma_pix = 0.0;
        self
    }
}

/// Class universe, split and per-class global embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub base: Vec<ClassId>,
    pub novel: Vec<ClassId>,
    pub background: ClassId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_sam: f64,
    pub sigma_img: f64,
    pub sigma_pix: f64,
    pub seed: u64,
    embeddings: BTreeMap<ClassId, Vec<f64>>,
}

/// Unit vector from a normalized isotropic Gaussian draw.
pub(crate) fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn make_dataset(cfg: &DatasetConfig) -> Result<DatasetSpec> {
    if cfg.base_classes.len() < 2 || cfg.novel_classes.len() < 2 {
        return Err(FcpError::Config(format!(
            "need at least 2 base and 2 novel classes, got {} and {}",
            cfg.base_classes.len(),
            cfg.novel_classes.len()
        )));
    }
    let base: BTreeSet<ClassId> = cfg.base_classes.iter().copied().collect();
    let novel: BTreeSet<ClassId> = cfg.novel_classes.iter().copied().collect();
    if base.len() != cfg.base_classes.len() || novel.len() != cfg.novel_classes.len() {
        return Err(FcpError::Config("duplicate class ids in a split".into()));
    }
    if let Some(c) = base.intersection(&novel).next() {
        return Err(FcpError::Config(format!("class {c} is in both base and novel splits")));
    }
    if base.contains(&cfg.background) || novel.contains(&cfg.background) {
        return Err(FcpError::Config(format!(
            "background id {} collides with a class",
            cfg.background
        )));
    }
    if cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(FcpError::Config("channels and grid size must be positive".into()));
    }
    for (name, s) in [
        ("sigma_sam", cfg.sigma_sam),
        ("sigma_img", cfg.sigma_img),
        ("sigma_pix", cfg.sigma_pix),
    ] {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(FcpError::Config(format!(
                "{name} must be a finite non-negative value, got {s}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut universe: Vec<ClassId> = base.iter().chain(&novel).copied().collect();
    universe.push(cfg.background);
    universe.sort_unstable();
    let embeddings = universe
        .into_iter()
        .map(|c| (c, unit_gaussian(&mut rng, cfg.channels)))
        .collect();

    Ok(DatasetSpec {
        base: base.into_iter().collect(),
        novel: novel.into_iter().collect(),
        background: cfg.background,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        sigma_sam: cfg.sigma_sam,
        sigma_img: cfg.sigma_img,
        sigma_pix: cfg.sigma_pix,
        seed: cfg.seed,
        embeddings,
    })
}

impl DatasetSpec {
    pub fn classes(&self, phase: Phase) -> &[ClassId] {
        match phase {
            Phase::Base => &self.base,
            Phase::Novel => &self.novel,
        }
    }

    pub fn phase_of(&self, class: ClassId) -> Option<Phase> {
        if self.base.binary_search(&class).is_ok() {
            Some(Phase::Base)
        } else if self.novel.binary_search(&class).is_ok() {
            Some(Phase::Novel)
        } else {
            None
        }
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.embeddings.contains_key(&class)
    }

    pub fn embedding(&self, class: ClassId) -> Result<&[f64]> {
        self.embeddings
            .get(&class)
            .map(Vec::as_slice)
            .ok_or_else(|| FcpError::Config(format!("unknown class {class}")))
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}
