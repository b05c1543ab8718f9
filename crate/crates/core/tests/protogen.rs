use fcp_core::autodiff::{Graph, Parameter, Tensor};
use fcp_core::params::{affine_specs, bind, init_parameters, Affine, Cursor};
use fcp_core::protogen::{
    build_query_prototypes, build_support_prototypes, build_support_steps, cross_attention_step, guide_features,
    mask_average_pool, mask_average_pool_expand, masked_cross_attention_step, Projection, ProtoConfig, ProtoParams,
    QueryGuide, Shot,
};
use fcp_core::pseudomask::Mask;
use fcp_core::synth::FeatureMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let mut fg: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
    let p = rng.gen_range(0..h * w);
    fg[p] = true;
    Mask::from_bools(h, w, &fg).unwrap()
}

fn projection_params(c: usize, rng: &mut ChaCha8Rng) -> Vec<Parameter> {
    let specs: Vec<_> = ["q", "k", "v"].iter().flat_map(|p| affine_specs(p, c, c)).collect();
    init_parameters(&specs, rng).unwrap()
}

/// Row-major `out = W·x + b` for a column vector `x`.
fn affine(p: &[Parameter], x: &[f64]) -> Vec<f64> {
    let (w, b) = (&p[0].value, &p[1].value);
    let (out, inp) = (p[0].shape[0], p[0].shape[1]);
    (0..out)
        .map(|i| b[i] + (0..inp).map(|j| w[i * inp + j] * x[j]).sum::<f64>())
        .collect()
}

/// Dense attention with masked logits set to −∞ before an explicit softmax.
fn dense_oracle(
    p: &[Parameter],
    tokens: &[f64],
    n: usize,
    keys: &FeatureMap,
    values: &FeatureMap,
    mask: Option<&Mask>,
) -> (Vec<f64>, Vec<f64>) {
    let c = keys.channels;
    let hw = keys.pixels();
    let ks: Vec<Vec<f64>> = (0..hw).map(|x| affine(&p[2..4], &keys.pixel(x))).collect();
    let vs: Vec<Vec<f64>> = (0..hw).map(|x| affine(&p[4..6], &values.pixel(x))).collect();
    let (mut out, mut weights) = (vec![0.0; n * c], vec![0.0; n * hw]);
    for i in 0..n {
        let q = affine(&p[0..2], &tokens[i * c..(i + 1) * c]);
        let logits: Vec<f64> = (0..hw)
            .map(|x| {
                if mask.is_some_and(|m| m.values()[x] == 0.0) {
                    f64::NEG_INFINITY
                } else {
                    q.iter().zip(&ks[x]).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt()
                }
            })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for x in 0..hw {
            weights[i * hw + x] = e[x] / z;
            for k in 0..c {
                out[i * c + k] += e[x] / z * vs[x][k];
            }
        }
    }
    (out, weights)
}

fn bound_projection<'g>(ts: &[Tensor<'g>], c: usize) -> Projection<'g> {
    Projection::read(&mut Cursor::new(ts), c).unwrap()
}

#[test]
fn masked_attention_matches_dense_oracle_over_100_instances() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, h, w) = (rng.gen_range(1..6), 16, 8, 8);
        let p = projection_params(c, &mut rng);
        let tokens: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let keys = random_map(&mut rng, c, h, w);
        let values = random_map(&mut rng, c, h, w);
        let mask = random_mask(&mut rng, h, w);

        let g = Graph::new();
        let ts = bind(&g, &p).unwrap();
        let proj = bound_projection(&ts, c);
        let t = g.constant(tokens.clone(), &[n, c]).unwrap();
        let (out, a) = masked_cross_attention_step(
            &t,
            &keys.to_tensor(&g).unwrap(),
            &values.to_tensor(&g).unwrap(),
            &mask,
            &proj,
        )
        .unwrap();
        let (want_out, want_a) = dense_oracle(&p, &tokens, n, &keys, &values, Some(&mask));
        for (x, y) in out.to_vec().iter().zip(&want_out) {
            assert!((x - y).abs() < 1e-9, "seed {seed}");
        }
        for (x, y) in a.to_vec().iter().zip(&want_a) {
            assert!((x - y).abs() < 1e-9, "seed {seed}");
        }

        let (out, _) =
            cross_attention_step(&t, &keys.to_tensor(&g).unwrap(), &values.to_tensor(&g).unwrap(), &proj).unwrap();
        let (want_out, _) = dense_oracle(&p, &tokens, n, &keys, &values, None);
        for (x, y) in out.to_vec().iter().zip(&want_out) {
            assert!((x - y).abs() < 1e-9, "seed {seed}");
        }
    }
}

struct Fixture {
    cfg: ProtoConfig,
    params: Vec<Parameter>,
    sam: FeatureMap,
    backbone: FeatureMap,
    mask: Mask,
    query_sam: FeatureMap,
    query_backbone: FeatureMap,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ProtoConfig::new(3, 6, 3);
    let params = init_parameters(&cfg.layout(), &mut rng).unwrap();
    Fixture {
        params,
        sam: random_map(&mut rng, 6, 5, 5),
        backbone: random_map(&mut rng, 6, 5, 5),
        mask: random_mask(&mut rng, 5, 5),
        query_sam: random_map(&mut rng, 6, 5, 5),
        query_backbone: random_map(&mut rng, 6, 5, 5),
        cfg,
    }
}

impl Fixture {
    fn shot(&self) -> Shot<'_> {
        Shot {
            sam: &self.sam,
            backbone: &self.backbone,
            mask: &self.mask,
        }
    }
}

fn support_tokens(fx: &Fixture, sam: &FeatureMap, backbone: &FeatureMap) -> Vec<f64> {
    let g = Graph::new();
    let ts = bind(&g, &fx.params).unwrap();
    let pp = ProtoParams::read(&fx.cfg, &mut Cursor::new(&ts)).unwrap();
    let shot = Shot {
        sam,
        backbone,
        mask: &fx.mask,
    };
    build_support_prototypes(&g, shot, &pp).unwrap().0.to_vec()
}

#[test]
fn support_records_are_distributions_over_foreground() {
    let fx = fixture(1);
    let g = Graph::new();
    let ts = bind(&g, &fx.params).unwrap();
    let pp = ProtoParams::read(&fx.cfg, &mut Cursor::new(&ts)).unwrap();
    let (tokens, recs) = build_support_prototypes(&g, fx.shot(), &pp).unwrap();
    assert_eq!(tokens.shape(), vec![3, 6]);
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    let fg = fx.mask.to_bools();
    for r in &recs {
        for row in r.weights.to_vec().chunks(25) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (w, &f) in row.iter().zip(&fg) {
                if !f {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }
}

#[test]
fn query_records_cover_every_step() {
    let fx = fixture(2);
    let g = Graph::new();
    let ts = bind(&g, &fx.params).unwrap();
    let pp = ProtoParams::read(&fx.cfg, &mut Cursor::new(&ts)).unwrap();
    for guide in [QueryGuide::Attention, QueryGuide::Conventional] {
        let qp = build_query_prototypes(&g, &fx.query_sam, &fx.query_backbone, &[fx.shot()], &pp, guide).unwrap();
        assert_eq!(qp.records.len(), 3);
        assert_eq!(qp.attention_masks.len(), 2);
        for r in &qp.records {
            for row in r.weights.to_vec().chunks(25) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&w| w > 0.0));
            }
        }
        let peak = qp.attention_masks[1].to_vec().into_iter().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_step_support_uses_backbone_values_only() {
    let fx = fixture(3);
    let g = Graph::new();
    let ts = bind(&g, &fx.params).unwrap();
    let pp = ProtoParams::read(&fx.cfg, &mut Cursor::new(&ts)).unwrap();
    let (_, recs) = build_support_steps(&g, fx.shot(), &pp, 1).unwrap();
    assert_eq!(recs.len(), 1);
    assert!(build_support_steps(&g, fx.shot(), &pp, 0).is_err());
    assert!(build_support_steps(&g, fx.shot(), &pp, 4).is_err());
}

#[test]
fn gradients_reach_every_prototype_parameter() {
    let fx = fixture(4);
    let g = Graph::new();
    let ts = bind(&g, &fx.params).unwrap();
    let pp = ProtoParams::read(&fx.cfg, &mut Cursor::new(&ts)).unwrap();
    let (s, _) = build_support_prototypes(&g, fx.shot(), &pp).unwrap();
    let qp = build_query_prototypes(
        &g,
        &fx.query_sam,
        &fx.query_backbone,
        &[fx.shot()],
        &pp,
        QueryGuide::Attention,
    )
    .unwrap();
    let probe = g
        .constant((0..18).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, 6])
        .unwrap();
    s.add(&qp.tokens)
        .unwrap()
        .mul(&probe)
        .unwrap()
        .sum()
        .backward()
        .unwrap();
    for (t, p) in ts.iter().zip(&fx.params) {
        let grad = t.grad().unwrap_or_default();
        assert!(grad.iter().any(|x| *x != 0.0), "no gradient reaches {}", p.name);
    }
}

#[test]
fn empty_support_mask_is_rejected() {
    let fx = fixture(5);
    let g = Graph::new();
    let ts = bind(&g, &fx.params).unwrap();
    let pp = ProtoParams::read(&fx.cfg, &mut Cursor::new(&ts)).unwrap();
    let empty = Mask::filled(5, 5, 0.0).unwrap();
    let shot = Shot {
        sam: &fx.sam,
        backbone: &fx.backbone,
        mask: &empty,
    };
    assert!(build_support_prototypes(&g, shot, &pp).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn support_prototypes_ignore_background(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let fx = fixture(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB6);
        let (mut sam, mut backbone) = (fx.sam.clone(), fx.backbone.clone());
        for (p, fg) in fx.mask.to_bools().into_iter().enumerate() {
            if !fg {
                let a: Vec<f64> = (0..6).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..6).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
                sam.set_pixel(p, &a);
                backbone.set_pixel(p, &b);
            }
        }
        let base = support_tokens(&fx, &fx.sam, &fx.backbone);
        let moved = support_tokens(&fx, &sam, &backbone);
        for (x, y) in base.iter().zip(&moved) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn pooling_matches_weighted_loop_for_soft_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let f = random_map(&mut rng, 5, 4, 6);
    let m = Mask::soft(4, 6, (0..24).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let pooled = mask_average_pool(&[(&f, &m)]).unwrap();
    let total: f64 = m.values().iter().sum();
    for (k, p) in pooled.iter().enumerate() {
        let want: f64 = (0..24).map(|x| m.values()[x] * f.values[k * 24 + x]).sum::<f64>() / total;
        assert!((p - want).abs() < 1e-12);
    }
    let e = mask_average_pool_expand(&f, &m).unwrap();
    assert!((0..5).all(|k| e.values[k * 24..(k + 1) * 24].iter().all(|&v| v == pooled[k])));
}

fn guide_with(weight: Vec<f64>, bias: Vec<f64>, f: &FeatureMap, m: &Mask, pooled: &[f64]) -> Vec<f64> {
    let c = f.channels;
    let g = Graph::new();
    let conv = Affine {
        weight: g.constant(weight, &[c, 2 * c + 1]).unwrap(),
        bias: g.constant(bias, &[c]).unwrap(),
    };
    guide_features(&f.to_tensor(&g).unwrap(), &m.to_tensor(&g).unwrap(), pooled, &conv)
        .unwrap()
        .to_vec()
}

#[test]
fn guide_features_selector_zero_and_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (c, hw) = (4, 12);
    let f = random_map(&mut rng, c, 3, 4);
    let m = random_mask(&mut rng, 3, 4);
    let pooled = rand_vec_of(&mut rng, c);
    let selector: Vec<f64> = (0..c * (2 * c + 1))
        .map(|i| if i % (2 * c + 1) == i / (2 * c + 1) { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(guide_with(selector, vec![0.0; c], &f, &m, &pooled), f.values);
    let bias = rand_vec_of(&mut rng, c);
    let out = guide_with(vec![0.0; c * (2 * c + 1)], bias.clone(), &f, &m, &pooled);
    assert!((0..c).all(|k| out[k * hw..(k + 1) * hw].iter().all(|&v| v == bias[k])));

    let w = rand_vec_of(&mut rng, c * (2 * c + 1));
    let out = guide_with(w.clone(), bias.clone(), &f, &m, &pooled);
    for o in 0..c {
        for x in 0..hw {
            let mut input: Vec<f64> = (0..c).map(|k| f.values[k * hw + x]).collect();
            input.push(m.values()[x]);
            input.extend(&pooled);
            let want = bias[o] + (0..2 * c + 1).map(|j| w[o * (2 * c + 1) + j] * input[j]).sum::<f64>();
            assert!((out[o * hw + x] - want).abs() < 1e-12);
        }
    }
}

fn rand_vec_of(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn attention_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let c = 4;
    let p = projection_params(c, &mut rng);
    let g = Graph::new();
    let ts = bind(&g, &p).unwrap();
    let proj = bound_projection(&ts, c);
    let tokens = g.constant(rand_vec_of(&mut rng, 2 * c), &[2, c]).unwrap();

    // a single unmasked pixel receives all the weight
    let keys = random_map(&mut rng, c, 2, 3);
    let values = random_map(&mut rng, c, 2, 3);
    let one = Mask::from_bools(2, 3, &[false, false, true, false, false, false]).unwrap();
    let (out, a) = masked_cross_attention_step(
        &tokens,
        &keys.to_tensor(&g).unwrap(),
        &values.to_tensor(&g).unwrap(),
        &one,
        &proj,
    )
    .unwrap();
    assert_eq!(
        a.to_vec(),
        vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
    );
    let pv = affine(&p[4..6], &values.pixel(2));
    for row in out.to_vec().chunks(c) {
        assert!(row.iter().zip(&pv).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    // identical key pixels give uniform weights and the mean projected value
    let px = rand_vec_of(&mut rng, c);
    let flat = FeatureMap::new(c, 2, 3, (0..c).flat_map(|k| std::iter::repeat_n(px[k], 6)).collect()).unwrap();
    let (out, a) = cross_attention_step(
        &tokens,
        &flat.to_tensor(&g).unwrap(),
        &values.to_tensor(&g).unwrap(),
        &proj,
    )
    .unwrap();
    assert!(a.to_vec().iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-12));
    let mean: Vec<f64> = (0..c)
        .map(|k| (0..6).map(|x| affine(&p[4..6], &values.pixel(x))[k]).sum::<f64>() / 6.0)
        .collect();
    for row in out.to_vec().chunks(c) {
        assert!(row.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    // the unmasked step equals the masked step under an all-ones mask
    let all = Mask::filled(2, 3, 1.0).unwrap();
    let k = keys.to_tensor(&g).unwrap();
    let v = values.to_tensor(&g).unwrap();
    let (m_out, m_a) = masked_cross_attention_step(&tokens, &k, &v, &all, &proj).unwrap();
    let (u_out, u_a) = cross_attention_step(&tokens, &k, &v, &proj).unwrap();
    assert_eq!((m_out.to_vec(), m_a.to_vec()), (u_out.to_vec(), u_a.to_vec()));
}

#[test]
fn self_query_noise_free_pseudo_mask_is_one_on_foreground() {
    use fcp_core::pseudomask::conventional_similarity;
    use fcp_core::synth::{make_dataset, random_scene, render_features, DatasetConfig};
    let d = make_dataset(&DatasetConfig::default().noise_free()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..10 {
        let scene = random_scene(&d, d.base[0], &d.base, &mut rng).unwrap();
        let (_, f, m) = render_features(&scene, &d).unwrap();
        let raw = conventional_similarity(&f, &[(&f, &m)]).unwrap();
        for (r, fg) in raw.iter().zip(m.to_bools()) {
            if fg {
                assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }
}
