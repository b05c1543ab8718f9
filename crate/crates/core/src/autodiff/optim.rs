//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use std::f64::consts::PI;

use crate::error::{dim_err, Result};

/// A named trainable array together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != value.len() || shape.is_empty() {
            return dim_err("parameter", format!("shape {shape:?} with {} values", value.len()));
        }
        Ok(Parameter {
            name: name.into(),
            shape: shape.to_vec(),
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            value,
            step: 0,
        })
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// One update of every parameter. `grads[i]` pairs with `params[i]`.
    pub fn step(&self, params: &mut [Parameter], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return dim_err("adam_step", format!("{} params, {} grads", params.len(), grads.len()));
        }
        for (p, g) in params.iter_mut().zip(grads) {
            if g.len() != p.numel() {
                return dim_err("adam_step", format!("{}: grad has {} entries", p.name, g.len()));
            }
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            for i in 0..g.len() {
                p.value[i] -= lr * self.weight_decay * p.value[i];
                p.first_moment[i] = self.beta1 * p.first_moment[i] + (1.0 - self.beta1) * g[i];
                p.second_moment[i] = self.beta2 * p.second_moment[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = p.first_moment[i] / c1;
                let v_hat = p.second_moment[i] / c2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at step 0 down to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let s = step.min(total) as f64;
    lr0 * 0.5 * (1.0 + (PI * s / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut p = vec![Parameter::new("w", &[3], vec![0.5, -1.0, 2.0]).unwrap()];
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut p, &[vec![0.0; 3]], 1e-2).unwrap();
        assert_eq!(p[0].value, vec![0.5, -1.0, 2.0]);
        assert_eq!(p[0].step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Parameter::new("w", &[4], vec![0.0; 4]).unwrap()];
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let g = vec![3.0, -0.01, 250.0, -7.5];
        opt.step(&mut p, &[g.clone()], 1e-3).unwrap();
        for (v, gi) in p[0].value.iter().zip(&g) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn trajectory_matches_scalar_reference() {
        let grads: Vec<f64> = (0..10).map(|i| ((i as f64) * 0.7).sin() + 0.1).collect();
        let opt = AdamW::default();
        let lr = 3e-3;
        let mut p = vec![Parameter::new("w", &[1], vec![0.8]).unwrap()];
        for g in &grads {
            opt.step(&mut p, &[vec![*g]], lr).unwrap();
        }

        // independent scalar recomputation
        let (mut x, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            x *= 1.0 - lr * 1e-4;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0].value[0] - x).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2e-4), 2e-4);
        assert!(cosine_lr(100, 100, 2e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 2e-4) - 1e-4).abs() < 1e-18);
    }
}
