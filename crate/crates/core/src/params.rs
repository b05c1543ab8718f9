//! Parameter layouts: named shapes in declaration order, their initialisation,
//! and a cursor for reading bound graph tensors back in the same order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{Graph, Parameter, Tensor};
use crate::error::{dim_err, FcpError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    /// Scaled identity matrix (square 2-D shapes only).
    Identity(f64),
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Weight `out × inp` and bias `out`, both uniform ±√(1/inp).
pub fn affine_specs(prefix: &str, out: usize, inp: usize) -> [ParamSpec; 2] {
    let bound = (1.0 / inp as f64).sqrt();
    [
        ParamSpec::new(format!("{prefix}.weight"), &[out, inp], Init::Uniform(bound)),
        ParamSpec::new(format!("{prefix}.bias"), &[out], Init::Uniform(bound)),
    ]
}

pub fn init_parameters<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Vec<Parameter>> {
    specs
        .iter()
        .map(|s| {
            let n = s.numel();
            let values: Vec<f64> = match s.init {
                Init::Gaussian(std) => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect(),
                Init::Uniform(b) => {
                    let u = Uniform::new_inclusive(-b, b);
                    (0..n).map(|_| u.sample(rng)).collect()
                }
                Init::Identity(gain) => {
                    let d = s.shape[0];
                    if s.shape.len() != 2 || s.shape[1] != d {
                        return Err(FcpError::Config(format!("identity init for non-square {:?}", s.shape)));
                    }
                    (0..n).map(|k| if k / d == k % d { gain } else { 0.0 }).collect()
                }
                Init::Zeros => vec![0.0; n],
            };
            Parameter::new(s.name.clone(), &s.shape, values)
        })
        .collect()
}

/// Check that stored parameters match a layout name-for-name and shape-for-shape.
pub fn check_layout(specs: &[ParamSpec], params: &[Parameter]) -> Result<()> {
    if specs.len() != params.len() {
        return Err(FcpError::Config(format!(
            "layout has {} parameters, got {}",
            specs.len(),
            params.len()
        )));
    }
    for (s, p) in specs.iter().zip(params) {
        if s.name != p.name || s.shape != p.shape {
            return Err(FcpError::Config(format!(
                "parameter {} {:?} does not match layout entry {} {:?}",
                p.name, p.shape, s.name, s.shape
            )));
        }
    }
    Ok(())
}

/// Square projection: `gain`-scaled identity weight, zero bias.
pub fn identity_specs(prefix: &str, dim: usize, gain: f64) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.weight"), &[dim, dim], Init::Identity(gain)),
        ParamSpec::new(format!("{prefix}.bias"), &[dim], Init::Zeros),
    ]
}

/// Register every parameter as a differentiable leaf, in order.
pub fn bind<'g>(g: &'g Graph, params: &[Parameter]) -> Result<Vec<Tensor<'g>>> {
    params.iter().map(|p| g.param(p.value.clone(), &p.shape)).collect()
}

/// Sequential reader over bound tensors.
pub struct Cursor<'a, 'g> {
    tensors: &'a [Tensor<'g>],
    at: usize,
}

impl<'a, 'g> Cursor<'a, 'g> {
    pub fn new(tensors: &'a [Tensor<'g>]) -> Self {
        Cursor { tensors, at: 0 }
    }

    pub fn next(&mut self, shape: &[usize]) -> Result<Tensor<'g>> {
        let t = *self
            .tensors
            .get(self.at)
            .ok_or_else(|| FcpError::Config(format!("parameter list ended at entry {}", self.at)))?;
        if t.shape() != shape {
            return dim_err(
                "parameter cursor",
                format!("entry {} has shape {:?}, expected {shape:?}", self.at, t.shape()),
            );
        }
        self.at += 1;
        Ok(t)
    }

    pub fn position(&self) -> usize {
        self.at
    }

    pub fn remaining(&self) -> usize {
        self.tensors.len() - self.at
    }
}

/// Row-wise affine layer bound to a graph.
#[derive(Clone, Copy)]
pub struct Affine<'g> {
    pub weight: Tensor<'g>,
    pub bias: Tensor<'g>,
}

impl<'g> Affine<'g> {
    pub fn read(cur: &mut Cursor<'_, 'g>, out: usize, inp: usize) -> Result<Self> {
        Ok(Affine {
            weight: cur.next(&[out, inp])?,
            bias: cur.next(&[out])?,
        })
    }

    /// `x[N×inp] → N×out`
    pub fn rows(&self, x: &Tensor<'g>) -> Result<Tensor<'g>> {
        crate::autodiff::linear_rows(x, &self.weight, &self.bias)
    }

    /// `x[inp×P] → out×P`
    pub fn pixels(&self, x: &Tensor<'g>) -> Result<Tensor<'g>> {
        crate::autodiff::conv1x1(x, &self.weight, &self.bias)
    }
}
