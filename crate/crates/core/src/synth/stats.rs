//! Within-image and cross-image similarity statistics of the two feature families.
//!
//! Protocol, per scene index `i < n_scenes`:
//! - draw a class `c` uniformly from base ∪ novel and render a scene with target `c`;
//!   FG is the target region, BG everything else (background and distractors);
//! - within-image: mean cosine over `PAIRS` random FG–FG pairs of distinct
//!   pixels and `PAIRS` random FG–BG pairs;
//! - cross-image: a second scene with target `c` (intra-class) and a third with
//!   a different class (inter-class); mean cosine over `PAIRS` random FG–FG pairs
//!   across the two images.
//!
//! Every reported number is the mean of the per-scene means.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{ClassId, DatasetSpec};
use super::render::{render_features, FeatureMap};
use super::scene::random_scene;
use crate::autodiff::cosine;
use crate::error::{FcpError, Result};

const PAIRS: usize = 128;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FamilyStats {
    /// FG-to-FG within one image.
    pub fg_fg: f64,
    /// FG-to-BG within one image.
    pub fg_bg: f64,
    /// FG-to-FG across two images of the same class.
    pub intra_class: f64,
    /// FG-to-FG across two images of different classes.
    pub inter_class: f64,
}

impl FamilyStats {
    pub fn fgbg_gap(&self) -> f64 {
        self.fg_fg - self.fg_bg
    }

    pub fn class_gap(&self) -> f64 {
        self.intra_class - self.inter_class
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ComplementarityStats {
    pub sam: FamilyStats,
    pub backbone: FamilyStats,
    pub scenes: usize,
}

impl ComplementarityStats {
    /// `(sam_fgbg_gap, backbone_fgbg_gap, sam_class_gap, backbone_class_gap)`
    pub fn gaps(&self) -> (f64, f64, f64, f64) {
        (
            self.sam.fgbg_gap(),
            self.backbone.fgbg_gap(),
            self.sam.class_gap(),
            self.backbone.class_gap(),
        )
    }
}

struct Rendered {
    sam: FeatureMap,
    backbone: FeatureMap,
    fg: Vec<usize>,
    bg: Vec<usize>,
}

fn render(dataset: &DatasetSpec, class: ClassId, pool: &[ClassId], rng: &mut ChaCha8Rng) -> Result<Rendered> {
    let scene = random_scene(dataset, class, pool, rng)?;
    let (sam, backbone, gt) = render_features(&scene, dataset)?;
    let (fg, bg): (Vec<usize>, Vec<usize>) = (0..gt.pixels()).partition(|&p| gt.values()[p] > 0.5);
    Ok(Rendered { sam, backbone, fg, bg })
}

fn mean_pair_cos(
    a: &FeatureMap,
    ai: &[usize],
    b: &FeatureMap,
    bi: &[usize],
    distinct: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for _ in 0..PAIRS {
        let p = *ai.choose(rng).expect("nonempty");
        let q = *bi.choose(rng).expect("nonempty");
        if distinct && p == q {
            continue;
        }
        total += cosine(&a.pixel(p), &b.pixel(q))?;
        n += 1;
    }
    Ok(if n == 0 { 1.0 } else { total / n as f64 })
}

pub fn complementarity_stats(dataset: &DatasetSpec, n_scenes: usize, seed: u64) -> Result<ComplementarityStats> {
    if n_scenes < 2 {
        return Err(FcpError::Contract(
            "complementarity_stats needs at least 2 scenes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<ClassId> = dataset.base.iter().chain(&dataset.novel).copied().collect();
    let mut sums = [[0.0f64; 4]; 2];

    for _ in 0..n_scenes {
        let c = classes[rng.gen_range(0..classes.len())];
        let other = loop {
            let o = classes[rng.gen_range(0..classes.len())];
            if o != c {
                break o;
            }
        };
        let a = render(dataset, c, &classes, &mut rng)?;
        let same = render(dataset, c, &classes, &mut rng)?;
        let diff = render(dataset, other, &classes, &mut rng)?;

        fn sam(r: &Rendered) -> &FeatureMap {
            &r.sam
        }
        fn backbone(r: &Rendered) -> &FeatureMap {
            &r.backbone
        }
        for (k, pick) in [sam as fn(&Rendered) -> &FeatureMap, backbone].into_iter().enumerate() {
            let fg_fg = if a.fg.len() > 1 {
                mean_pair_cos(pick(&a), &a.fg, pick(&a), &a.fg, true, &mut rng)?
            } else {
                1.0
            };
            let fg_bg = mean_pair_cos(pick(&a), &a.fg, pick(&a), &a.bg, false, &mut rng)?;
            let intra = mean_pair_cos(pick(&a), &a.fg, pick(&same), &same.fg, false, &mut rng)?;
            let inter = mean_pair_cos(pick(&a), &a.fg, pick(&diff), &diff.fg, false, &mut rng)?;
            for (s, v) in sums[k].iter_mut().zip([fg_fg, fg_bg, intra, inter]) {
                *s += v;
            }
        }
    }

    let n = n_scenes as f64;
    let fam = |s: [f64; 4]| FamilyStats {
        fg_fg: s[0] / n,
        fg_bg: s[1] / n,
        intra_class: s[2] / n,
        inter_class: s[3] / n,
    };
    Ok(ComplementarityStats {
        sam: fam(sums[0]),
        backbone: fam(sums[1]),
        scenes: n_scenes,
    })
}
