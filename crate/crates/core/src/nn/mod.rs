//! Minimal CPU layers with explicit backward passes.
//!
//! Every layer caches what it needs during [`Layer::forward`] and consumes that
//! cache in [`Layer::backward`]. [`Layer::infer`] is the pure evaluation-mode
//! path and never touches caches, so a model can be shared across threads for
//! read-only inference.

mod conv;
mod layers;
mod norm;
pub mod optim;

pub use conv::{Conv2d, GlobalAvgPool, MaxPool2d};
pub use layers::{Dropout, Linear, Relu, ResidualBlock};
pub use norm::BatchNorm;
pub use optim::{clip_grad_norm, AdamConfig, Optimizer, SgdConfig};

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Tensor = ArrayD<f64>;

/// A trainable (or frozen) parameter together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.raw_dim());
        Self { value, grad, trainable: true }
    }
}

/// Mutable view of one piece of layer state.
pub enum SlotMut<'a> {
    Param(&'a mut Param),
    /// Non-learned state such as normalization running statistics.
    Buffer(&'a mut Tensor),
}

/// Shared view of one piece of layer state.
pub enum Slot<'a> {
    Param(&'a Param),
    Buffer(&'a Tensor),
}

impl Slot<'_> {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => b,
        }
    }
}

/// Per-step context for training-mode forward passes.
pub struct TrainCtx {
    pub rng: ChaCha8Rng,
}

impl TrainCtx {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

pub trait Layer: Send + Sync + std::fmt::Debug {
    /// Evaluation-mode forward pass.
    fn infer(&self, x: &Tensor) -> Tensor;
    /// Training-mode forward pass; caches activations for `backward`.
    fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx) -> Tensor;
    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;

    fn visit(&self, _prefix: &str, _f: &mut dyn FnMut(String, Slot<'_>)) {}
    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, SlotMut<'_>)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
}

/// An ordered stack of layers named by position (`"0"`, `"1"`, ...).
#[derive(Debug, Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.layers.iter().fold(x.clone(), |acc, l| l.infer(&acc))
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx) -> Tensor {
        let mut acc = x.clone();
        for l in &mut self.layers {
            acc = l.forward(&acc, ctx);
        }
        acc
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Anything exposing named parameters and buffers.
pub trait ParamTree {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>));
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>));
}

impl<T: Layer + ?Sized> ParamTree for T {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.visit(prefix, f);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        self.visit_mut(prefix, f);
    }
}

/// Zeroes every parameter gradient reachable from `tree`.
pub fn zero_grad<T: ParamTree + ?Sized>(tree: &mut T) {
    tree.visit_state_mut("", &mut |_, slot| {
        if let SlotMut::Param(p) = slot {
            p.grad.fill(0.0);
        }
    });
}

/// Marks every parameter reachable from `tree` as trainable or frozen.
pub fn set_trainable<T: ParamTree + ?Sized>(tree: &mut T, trainable: bool) {
    tree.visit_state_mut("", &mut |_, slot| {
        if let SlotMut::Param(p) = slot {
            p.trainable = trainable;
        }
    });
}
