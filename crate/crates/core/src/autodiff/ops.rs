//! Composite ops built from graph primitives, plus the plain-array helpers
//! used where no gradient is needed.

use super::graph::Tensor;
use crate::error::{dim_err, FcpError, Result};

/// Per-pixel affine map over a `Cin × P` feature tensor.
/// `weight` is `Cout × Cin`, `bias` has `Cout` entries.
pub fn conv1x1<'g>(x: &Tensor<'g>, weight: &Tensor<'g>, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
    let ws = weight.shape();
    let xs = x.shape();
    if ws.len() != 2 || xs.len() != 2 || ws[1] != xs[0] {
        return dim_err("conv1x1", format!("weight {ws:?} against input {xs:?}"));
    }
    weight.matmul(x)?.add_col_bias(bias)
}

/// Row-wise dense layer: `x[N×Cin] · weightᵀ + bias`, with `weight` stored `Cout × Cin`.
pub fn linear_rows<'g>(x: &Tensor<'g>, weight: &Tensor<'g>, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
    let ws = weight.shape();
    let xs = x.shape();
    if ws.len() != 2 || xs.len() != 2 || ws[1] != xs[1] {
        return dim_err("linear_rows", format!("weight {ws:?} against input {xs:?}"));
    }
    x.matmul(&weight.transpose()?)?.add_row_bias(bias)
}

/// Softmax over the last dimension of `logits / scale`.
pub fn scaled_softmax<'g>(logits: &Tensor<'g>, scale: f64) -> Result<Tensor<'g>> {
    let shape = logits.shape();
    let last = *shape.last().expect("tensors have at least one dimension");
    let rows = logits.numel() / last;
    logits
        .reshape(&[rows, last])?
        .softmax_rows(scale, None)?
        .reshape(&shape)
}

/// Cosine similarity of two equal-length tensors, as a differentiable scalar.
pub fn cosine_sim<'g>(u: &Tensor<'g>, v: &Tensor<'g>) -> Result<Tensor<'g>> {
    if u.numel() != v.numel() {
        return dim_err("cosine_sim", format!("{} vs {} entries", u.numel(), v.numel()));
    }
    let n = u.numel();
    let un = u.reshape(&[1, n])?.row_normalize()?;
    let vn = v.reshape(&[1, n])?.row_normalize()?;
    Ok(un.mul(&vn)?.sum())
}

/// Cosine similarity on plain slices.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return dim_err("cosine", format!("{} vs {} entries", u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(FcpError::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv1x1_identity_and_zero_weight() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = rand_vec(&mut rng, 3 * 5);
        let x = g.constant(xv.clone(), &[3, 5]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(eye, &[3, 3]).unwrap();
        let b0 = g.constant(vec![0.0; 3], &[3]).unwrap();
        assert_eq!(conv1x1(&x, &w, &b0).unwrap().to_vec(), xv);

        let wz = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![0.5, -2.0], &[2]).unwrap();
        let y = conv1x1(&x, &wz, &b).unwrap().to_vec();
        assert!(y[..5].iter().all(|&v| v == 0.5));
        assert!(y[5..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv1x1_rejects_channel_mismatch() {
        let g = Graph::new();
        let x = g.constant(vec![0.0; 8], &[4, 2]).unwrap();
        let w = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![0.0; 2], &[2]).unwrap();
        assert!(matches!(conv1x1(&x, &w, &b), Err(FcpError::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let g = Graph::new();
        let u = g.constant(vec![3.0; 7], &[7]).unwrap();
        for s in [0.1, 1.0, 8.0] {
            let y = scaled_softmax(&u, s).unwrap().to_vec();
            assert!(y.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        }
        let mut l = vec![0.0; 5];
        l[2] = 1e6;
        let t = g.constant(l, &[5]).unwrap();
        let y = scaled_softmax(&t, 1.0).unwrap().to_vec();
        assert!((y[2] - 1.0).abs() < 1e-12);
        assert!(y.iter().enumerate().all(|(i, &v)| i == 2 || v < 1e-12));
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(FcpError::Degenerate(_))));

        let g = Graph::new();
        let a = g.constant(v.to_vec(), &[3]).unwrap();
        let b = g.constant(neg, &[3]).unwrap();
        assert!((cosine_sim(&a, &b).unwrap().item() + 1.0).abs() < 1e-15);
        let z = g.constant(vec![0.0; 3], &[3]).unwrap();
        assert!(cosine_sim(&a, &z).is_err());
    }
}
