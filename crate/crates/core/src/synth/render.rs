use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{unit_gaussian, DatasetSpec};
use super::scene::SceneSpec;
use crate::autodiff::{Graph, Tensor};
use crate::error::{dim_err, FcpError, Result};
use crate::pseudomask::Mask;

/// `C × H × W` feature array, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels * height * width != values.len() || channels == 0 || height == 0 || width == 0 {
            return dim_err(
                "feature_map",
                format!("{channels}x{height}x{width} with {} values", values.len()),
            );
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FcpError::Contract("feature map has non-finite values".into()));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector at row-major pixel `p`.
    pub fn pixel(&self, p: usize) -> Vec<f64> {
        let hw = self.pixels();
        (0..self.channels).map(|c| self.values[c * hw + p]).collect()
    }

    pub fn set_pixel(&mut self, p: usize, v: &[f64]) {
        let hw = self.pixels();
        for (c, x) in v.iter().enumerate() {
            self.values[c * hw + p] = *x;
        }
    }

    /// Pixel-major copy (`HW × C`).
    pub fn pixel_major(&self) -> Vec<f64> {
        let hw = self.pixels();
        let mut out = vec![0.0; self.values.len()];
        for c in 0..self.channels {
            for p in 0..hw {
                out[p * self.channels + c] = self.values[c * hw + p];
            }
        }
        out
    }

    /// Non-differentiable `C × HW` graph tensor.
    pub fn to_tensor<'g>(&self, g: &'g Graph) -> Result<Tensor<'g>> {
        g.constant(self.values.clone(), &[self.channels, self.pixels()])
    }

    pub fn same_grid(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn scene_rng(dataset: &DatasetSpec, scene: &SceneSpec) -> ChaCha8Rng {
    // splitmix-style mix so nearby seeds give unrelated streams
    let mut z = dataset.seed ^ scene.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Features of both families for one scene, plus the target-class mask.
///
/// SAM-like pixels: `normalize(s_seg + σ_sam·n)` where `s_seg` is a fresh
/// unit vector per (image, segment). Backbone-like pixels:
/// `normalize(e_class + σ_img·u_image + σ_pix·n)` with the global class
/// embedding `e_class`. Noise vectors are `N(0, I/C)`, so each has norm ≈ σ.
pub fn render_features(scene: &SceneSpec, dataset: &DatasetSpec) -> Result<(FeatureMap, FeatureMap, Mask)> {
    if scene.height != dataset.height || scene.width != dataset.width {
        return dim_err(
            "render_features",
            format!(
                "scene {}x{} vs dataset {}x{}",
                scene.height, scene.width, dataset.height, dataset.width
            ),
        );
    }
    for s in &scene.segments {
        dataset.embedding(s.class)?;
    }
    scene.validate()?;

    let c = dataset.channels;
    let inv_sqrt_c = 1.0 / (c as f64).sqrt();
    let mut rng = scene_rng(dataset, scene);
    let mut sam = FeatureMap::zeros(c, scene.height, scene.width);
    let mut backbone = FeatureMap::zeros(c, scene.height, scene.width);

    let image_shift: Vec<f64> = (0..c)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|x: f64| x * inv_sqrt_c)
        .collect();

    let mut v = vec![0.0; c];
    for seg in &scene.segments {
        let seg_embed = unit_gaussian(&mut rng, c);
        let class_embed = dataset.embedding(seg.class)?;
        for &p in &seg.pixels {
            for (k, x) in v.iter_mut().enumerate() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x = seg_embed[k] + dataset.sigma_sam * n * inv_sqrt_c;
            }
            normalize(&mut v);
            sam.set_pixel(p, &v);

            for (k, x) in v.iter_mut().enumerate() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x = class_embed[k] + dataset.sigma_img * image_shift[k] + dataset.sigma_pix * n * inv_sqrt_c;
            }
            normalize(&mut v);
            backbone.set_pixel(p, &v);
        }
    }

    let gt = Mask::from_bools(scene.height, scene.width, &scene.target_pixels())?;
    Ok((sam, backbone, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::cosine;
    use crate::synth::{make_dataset, random_scene, DatasetConfig};
    use rand::SeedableRng;

    #[test]
    fn features_are_unit_norm() {
        let d = make_dataset(&DatasetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_scene(&d, 2, &d.base, &mut rng).unwrap();
        let (g, f, m) = render_features(&s, &d).unwrap();
        for fm in [&g, &f] {
            for p in 0..fm.pixels() {
                let n: f64 = fm.pixel(p).iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(m.foreground_count(), s.target_count());
    }

    #[test]
    fn noise_free_segments_are_constant() {
        let d = make_dataset(&DatasetConfig::default().noise_free()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_scene(&d, 4, &d.base, &mut rng).unwrap();
        let (g, _, _) = render_features(&s, &d).unwrap();
        for seg in &s.segments {
            let first = g.pixel(seg.pixels[0]);
            for &p in &seg.pixels {
                assert!((cosine(&first, &g.pixel(p)).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let d = make_dataset(&DatasetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_scene(&d, 5, &d.base, &mut rng).unwrap();
        let (a, b, _) = render_features(&s, &d).unwrap();
        let (a2, b2, _) = render_features(&s, &d).unwrap();
        assert!(a.values.iter().zip(&a2.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b.values.iter().zip(&b2.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn unknown_class_in_scene_errors() {
        let d = make_dataset(&DatasetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = random_scene(&d, 5, &d.base, &mut rng).unwrap();
        s.segments[1].class = 777;
        assert!(render_features(&s, &d).is_err());
    }
}
