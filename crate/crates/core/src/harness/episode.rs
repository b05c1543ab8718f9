use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FcpError, Result};
use crate::protogen::Shot;
use crate::pseudomask::Mask;
use crate::synth::{random_scene, render_features, ClassId, DatasetSpec, FeatureMap, Phase};

/// Features of both families plus the binary target mask for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeImage {
    pub sam: FeatureMap,
    pub backbone: FeatureMap,
    pub mask: Mask,
}

impl EpisodeImage {
    pub fn shot(&self) -> Shot<'_> {
        Shot {
            sam: &self.sam,
            backbone: &self.backbone,
            mask: &self.mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<EpisodeImage>,
    pub query: EpisodeImage,
    pub class: ClassId,
    pub phase: Phase,
}

impl Episode {
    pub fn shots(&self) -> Vec<Shot<'_>> {
        self.support.iter().map(EpisodeImage::shot).collect()
    }

    pub fn validate(&self, dataset: &DatasetSpec) -> Result<()> {
        if self.support.is_empty() {
            return Err(FcpError::Contract("episode has no support image".into()));
        }
        if dataset.phase_of(self.class) != Some(self.phase) {
            return Err(FcpError::Contract(format!(
                "class {} does not belong to the {} split",
                self.class,
                self.phase.as_str()
            )));
        }
        for img in self.support.iter().chain([&self.query]) {
            if !img.mask.is_binary() || img.mask.foreground_count() == 0 {
                return Err(FcpError::Contract("episode mask must be binary and nonempty".into()));
            }
        }
        Ok(())
    }
}

fn image(dataset: &DatasetSpec, class: ClassId, pool: &[ClassId], rng: &mut ChaCha8Rng) -> Result<EpisodeImage> {
    let scene = random_scene(dataset, class, pool, rng)?;
    let (sam, backbone, mask) = render_features(&scene, dataset)?;
    Ok(EpisodeImage { sam, backbone, mask })
}

/// Draw a class from the phase split, then `k` support images and one query
/// containing it. Distractor objects come from the same split.
pub fn sample_episode(dataset: &DatasetSpec, phase: Phase, k: usize, rng: &mut ChaCha8Rng) -> Result<Episode> {
    if k == 0 {
        return Err(FcpError::Contract("an episode needs at least one support image".into()));
    }
    let pool = dataset.classes(phase);
    if pool.is_empty() {
        return Err(FcpError::Sampling(format!("the {} split is empty", phase.as_str())));
    }
    let class = pool[rng.gen_range(0..pool.len())];
    let support = (0..k)
        .map(|_| image(dataset, class, pool, rng))
        .collect::<Result<Vec<_>>>()?;
    let query = image(dataset, class, pool, rng)?;
    let ep = Episode {
        support,
        query,
        class,
        phase,
    };
    ep.validate(dataset)?;
    Ok(ep)
}
