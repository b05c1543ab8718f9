use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{ClassId, DatasetSpec};
use crate::error::{FcpError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub class: ClassId,
    /// Row-major pixel indices.
    pub pixels: Vec<usize>,
}

/// Partition of an `H × W` grid into class-labelled segments.
///
/// Segment 0 is the background. `target` is the class the episode asks
/// about; `seed` drives the per-image feature noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Segment>,
    pub background: ClassId,
    pub target: ClassId,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect {
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
}

impl Shape {
    fn covers(&self, r: usize, c: usize) -> bool {
        match *self {
            Shape::Rect { top, left, h, w } => r >= top && r < top + h && c >= left && c < left + w,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Shape {
        if rng.gen_bool(0.5) {
            let h = rng.gen_range((height / 5).max(1)..=(height / 2).max(1));
            let w = rng.gen_range((width / 5).max(1)..=(width / 2).max(1));
            Shape::Rect {
                top: rng.gen_range(0..=height - h),
                left: rng.gen_range(0..=width - w),
                h,
                w,
            }
        } else {
            let ry = rng.gen_range((height as f64 / 10.0).max(0.75)..=(height as f64 / 4.0).max(1.0));
            let rx = rng.gen_range((width as f64 / 10.0).max(0.75)..=(width as f64 / 4.0).max(1.0));
            Shape::Ellipse {
                cy: rng.gen_range(ry..=(height as f64 - ry).max(ry)),
                cx: rng.gen_range(rx..=(width as f64 - rx).max(rx)),
                ry,
                rx,
            }
        }
    }
}

impl SceneSpec {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel segment index.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![usize::MAX; self.pixels()];
        for (i, s) in self.segments.iter().enumerate() {
            for &p in &s.pixels {
                labels[p] = i;
            }
        }
        labels
    }

    /// Binary map of the target class.
    pub fn target_pixels(&self) -> Vec<bool> {
        let mut out = vec![false; self.pixels()];
        for s in self.segments.iter().filter(|s| s.class == self.target) {
            for &p in &s.pixels {
                out[p] = true;
            }
        }
        out
    }

    pub fn target_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.class == self.target)
            .map(|s| s.pixels.len())
            .sum()
    }

    /// Segments partition the grid and at least one foreground segment is nonempty.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.pixels()];
        for s in &self.segments {
            for &p in &s.pixels {
                if p >= seen.len() || seen[p] {
                    return Err(FcpError::Contract(format!(
                        "pixel {p} is out of range or in two segments"
                    )));
                }
                seen[p] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(FcpError::Contract("segments do not cover the grid".into()));
        }
        if !self
            .segments
            .iter()
            .any(|s| s.class != self.background && !s.pixels.is_empty())
        {
            return Err(FcpError::Contract("scene has no foreground segment".into()));
        }
        Ok(())
    }
}

/// Smallest visible target area accepted by the sampler.
pub fn min_target_pixels(height: usize, width: usize) -> usize {
    (height * width / 64).max(1)
}

/// Draw 1–3 rectangles/ellipses over a background, one of them of class
/// `target`, the rest from `distractors`. Later shapes occlude earlier ones;
/// draws are rejected until the target keeps enough visible pixels.
pub fn random_scene(
    dataset: &DatasetSpec,
    target: ClassId,
    distractors: &[ClassId],
    rng: &mut ChaCha8Rng,
) -> Result<SceneSpec> {
    if !dataset.contains(target) || target == dataset.background {
        return Err(FcpError::Config(format!("unknown target class {target}")));
    }
    let (h, w) = (dataset.height, dataset.width);
    let pool: Vec<ClassId> = distractors.iter().copied().filter(|&c| c != target).collect();
    let min_px = min_target_pixels(h, w);

    for _ in 0..1000 {
        let n_shapes = if pool.is_empty() { 1 } else { rng.gen_range(1..=3) };
        let mut classes = vec![target];
        for _ in 1..n_shapes {
            classes.push(*pool.choose(rng).expect("pool is nonempty"));
        }
        classes.shuffle(rng);
        let shapes: Vec<Shape> = classes.iter().map(|_| Shape::random(rng, h, w)).collect();

        let mut label = vec![0usize; h * w];
        for (k, shape) in shapes.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    if shape.covers(r, c) {
                        label[r * w + c] = k + 1;
                    }
                }
            }
        }
        let mut segments = vec![Segment {
            class: dataset.background,
            pixels: Vec::new(),
        }];
        segments.extend(classes.iter().map(|&class| Segment {
            class,
            pixels: Vec::new(),
        }));
        for (p, &l) in label.iter().enumerate() {
            segments[l].pixels.push(p);
        }
        segments.retain(|s| s.class == dataset.background || !s.pixels.is_empty());

        let scene = SceneSpec {
            height: h,
            width: w,
            segments,
            background: dataset.background,
            target,
            seed: rng.gen(),
        };
        if scene.target_count() >= min_px {
            return Ok(scene);
        }
    }
    Err(FcpError::Sampling(format!(
        "could not place a visible class-{target} segment"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, DatasetConfig};
    use rand::SeedableRng;

    #[test]
    fn random_scenes_partition_the_grid() {
        let d = make_dataset(&DatasetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = random_scene(&d, 3, &d.base, &mut rng).unwrap();
            s.validate().unwrap();
            assert!(s.target_count() >= min_target_pixels(32, 32));
            assert!(s.segments.len() <= 4);
        }
    }

    #[test]
    fn unknown_target_rejected() {
        let d = make_dataset(&DatasetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(random_scene(&d, 99, &d.base, &mut rng).is_err());
        assert!(random_scene(&d, 0, &d.base, &mut rng).is_err());
    }
}
