//! Small building blocks shared by the adapters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Param, Tensor, Var};

/// Anything that owns [`Param`]s.
///
/// `visit` and `visit_mut` must walk parameters in the same order; names are
/// dot-separated paths rooted at `prefix`.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name, p.value.clone())));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Smooth nonlinearity used inside the residual MLPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
    Tanh,
    /// Linear pass-through; turns an MLP into a product of affine maps.
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Silu => g.silu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * crate::autodiff::sigmoid(x),
            Activation::Gelu => crate::autodiff::gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Gaussian init with standard deviation `scale / sqrt(fan_in)`.
pub fn randn_scaled<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
    let std = scale / (rows.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// `y = x W + b`, weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        Self { weight: Param::new(randn_scaled(input, output, 1.0, rng)), bias: bias.then(|| Param::zeros(1, output)) }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self { weight: Param::zeros(input, output), bias: bias.then(|| Param::zeros(1, output)) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.affine(x, w, b)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Two affine maps with a nonlinearity between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    /// Random first layer, all-zero second layer: the MLP outputs zero at init.
    pub fn zero_out<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        bias: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self { fc1: Linear::new(input, hidden, bias, rng), fc2: Linear::zeros(hidden, output, bias), activation }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = self.activation.apply(g, h);
        self.fc2.forward(g, h)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Randomizes every parameter of a module; test helper for oracles and
/// gradient checks where zero-initialized layers would hide bugs.
pub fn randomize<M: Module + ?Sized, R: Rng + ?Sized>(module: &mut M, scale: f64, rng: &mut R) {
    let normal = Normal::new(0.0, scale).expect("finite scale");
    module.visit_mut("", &mut |_, p| {
        p.value.mapv_inplace(|_| normal.sample(rng));
    });
}
