use fcp_core::autodiff::{Graph, Tensor};
use fcp_core::losses::{
    bce_loss, dice_loss, guide_loss, ortho_loss, pairwise_cosine_sum, prompt_loss, total_loss, LossConfig,
};
use fcp_core::protogen::{AttentionRecord, Side};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-7;

fn binary_nonempty(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    m[rng.gen_range(0..n)] = 1.0;
    m
}

fn record<'g>(g: &'g Graph, step: usize, side: Side, w: Vec<f64>, n: usize) -> AttentionRecord<'g> {
    let hw = w.len() / n;
    AttentionRecord {
        step,
        side,
        weights: g.constant(w, &[n, hw]).unwrap(),
        height: 1,
        width: hw,
    }
}

fn row(g: &Graph, v: Vec<f64>) -> Tensor<'_> {
    let n = v.len();
    g.constant(v, &[1, n]).unwrap()
}

#[test]
fn bce_and_dice_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let p: Vec<f64> = (0..20).map(|_| rng.gen_range(0.01..0.99)).collect();
        let y = binary_nonempty(&mut rng, 20);
        let g = Graph::new();
        let bce = bce_loss(&row(&g, p.clone()), &row(&g, y.clone()), EPS).unwrap().item();
        let want = -p
            .iter()
            .zip(&y)
            .map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / 20.0;
        assert!((bce - want).abs() < 1e-12);
        let dice = dice_loss(&row(&g, p.clone()), &row(&g, y.clone())).unwrap().item();
        let inter: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
        let want = 1.0 - 2.0 * inter / (p.iter().map(|x| x * x).sum::<f64>() + y.iter().sum::<f64>());
        assert!((dice - want).abs() < 1e-12);
    }
}

#[test]
fn ortho_identical_two_token_maps_two_steps_is_four() {
    let g = Graph::new();
    let w = vec![0.25, 0.25, 0.5, 0.25, 0.25, 0.5];
    let sup = [
        record(&g, 1, Side::Support, w.clone(), 2),
        record(&g, 2, Side::Support, w.clone(), 2),
    ];
    let qry = [
        record(&g, 1, Side::Query, w.clone(), 2),
        record(&g, 2, Side::Query, w, 2),
    ];
    let o = ortho_loss(&sup, &qry, 2, false).unwrap().item();
    assert!((o - 4.0).abs() < 1e-12);
}

#[test]
fn ortho_disjoint_maps_is_zero() {
    let g = Graph::new();
    let w = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.3, 0.7];
    let sup = [record(&g, 1, Side::Support, w.clone(), 2)];
    let qry = [record(&g, 1, Side::Query, w, 2)];
    assert_eq!(ortho_loss(&sup, &qry, 2, false).unwrap().item(), 0.0);
}

#[test]
fn ortho_missing_step_is_an_error() {
    let g = Graph::new();
    let sup = [record(&g, 2, Side::Support, vec![1.0, 0.0], 1)];
    assert!(ortho_loss(&sup, &sup, 2, false).is_err());
}

#[test]
fn guide_loss_averages_masks() {
    let g = Graph::new();
    let gt = row(&g, vec![1.0, 0.0, 1.0]);
    let a = row(&g, vec![0.9, 0.2, 0.6]);
    let b = row(&g, vec![0.4, 0.5, 0.8]);
    let both = guide_loss(&[a, b], &gt, EPS).unwrap().item();
    let pa = prompt_loss(&a, &gt, EPS).unwrap().item();
    let pb = prompt_loss(&b, &gt, EPS).unwrap().item();
    assert!((both - (pa + pb) / 2.0).abs() < 1e-12);
    assert!(guide_loss(&[], &gt, EPS).is_err());
}

#[test]
fn total_loss_weights_and_missing_terms() {
    let g = Graph::new();
    let (p, gd, o) = (g.scalar(1.5), g.scalar(2.0), g.scalar(3.0));
    let cfg = LossConfig::default();
    let t = total_loss(&p, Some(&gd), Some(&o), &cfg).unwrap().item();
    assert!((t - (1.5 + 0.5 * 2.0 + 0.05 * 3.0)).abs() < 1e-15);
    assert!(total_loss(&p, None, Some(&o), &cfg).is_err());
    let zero = LossConfig {
        lambda_ortho: 0.0,
        lambda_guide: 0.0,
        ..cfg
    };
    assert_eq!(total_loss(&p, None, None, &zero).unwrap().item(), 1.5);
    assert_eq!(total_loss(&p, Some(&gd), Some(&o), &zero).unwrap().item(), 1.5);
}

proptest! {
    #[test]
    fn dice_identities(seed in any::<u64>(), n in 2usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = binary_nonempty(&mut rng, n);
        let g = Graph::new();
        let same = dice_loss(&row(&g, m.clone()), &row(&g, m.clone())).unwrap().item();
        prop_assert!(same.abs() < 1e-12);
        let inv: Vec<f64> = m.iter().map(|x| 1.0 - x).collect();
        let opp = dice_loss(&row(&g, m.clone()), &row(&g, inv)).unwrap().item();
        prop_assert!((opp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_of_half_is_ln2(seed in any::<u64>(), n in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = binary_nonempty(&mut rng, n);
        let g = Graph::new();
        let b = bce_loss(&row(&g, vec![0.5; n]), &row(&g, y), EPS).unwrap().item();
        prop_assert!((b - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn pairwise_cosine_bounds(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n * 10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g = Graph::new();
        let s = pairwise_cosine_sum(&g.constant(w, &[n, 10]).unwrap()).unwrap().item();
        prop_assert!(s >= 0.0 && s <= (n * (n - 1)) as f64 + 1e-12);
    }

    #[test]
    fn losses_are_finite_at_saturated_predictions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = binary_nonempty(&mut rng, 16);
        let p: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let g = Graph::new();
        let pred = g.param(p, &[1, 16]).unwrap();
        let l = prompt_loss(&pred, &row(&g, y), EPS).unwrap();
        prop_assert!(l.item().is_finite());
        l.backward().unwrap();
        prop_assert!(pred.grad().unwrap().iter().all(|x| x.is_finite()));
    }
}
