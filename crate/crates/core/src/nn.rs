//! Parameter containers shared by the model components.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::graph::{Graph, Tensor, Var};

pub type SeedRng = ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Walks every trainable tensor with a stable, hierarchical name.
///
/// The visiting order is the canonical order for optimizer state and for
/// checkpoint files, so implementations must not depend on hash ordering.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

impl Parameters for Vec<Tensor> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn normal_matrix(rng: &mut SeedRng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Fully connected layer `y = x·wᵀ + b` with `w: [out × in]`, `b: [1 × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(rng: &mut SeedRng, input: usize, output: usize) -> Self {
        Linear {
            w: normal_matrix(rng, output, input, (1.0 / input as f64).sqrt()),
            b: Tensor::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Tensor::zeros((output, input)),
            b: Tensor::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn check(&self) -> Result<()> {
        ensure!(
            self.b.dim() == (1, self.w.nrows()),
            "linear bias shape {:?} does not match weight rows {}",
            self.b.dim(),
            self.w.nrows()
        );
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = g.matmul_bt(x, w);
        g.add_row(y, b)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.dot(&self.w.t()) + &self.b
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

/// Affine layer normalization over the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn identity(width: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones((1, width)),
            beta: Tensor::zeros((1, width)),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, LAYER_NORM_EPS);
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Nonlinearity of the small perceptrons (position encoder, feed-forward).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn forward(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }
}

/// Deterministic generator for a labelled stream, so that independent parts of
/// the program (init, sampling, noise) never share a random sequence.
pub fn seeded_rng(seed: u64, stream: u64) -> SeedRng {
    use rand::SeedableRng;
    let mut rng = SeedRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn uniform(rng: &mut SeedRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
