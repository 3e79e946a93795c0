use ndarray::{Array2, Axis, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{join, uniform_init, BatchNorm, Conv2d, Layer, Param, Sequential, Slot, SlotMut, Tensor, TrainCtx};

/// Fully connected layer, `y = x Wᵀ + b` with `W: out × in`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = uniform_init(&[out_features, in_features], in_features, rng);
        let bias = uniform_init(&[out_features], in_features, rng);
        Self { weight: Param::new(weight), bias: Param::new(bias), input: None }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("linear weight is 2-D");
        let b = self.bias.value.view().into_shape_with_order(self.out_features()).expect("bias is 1-D");
        x.dot(&w.t()) + b
    }
}

fn as_matrix(x: &Tensor) -> Array2<f64> {
    let rows = x.shape()[0];
    let cols = x.len() / rows.max(1);
    x.as_standard_layout().into_owned().into_shape_with_order((rows, cols)).expect("flatten to matrix")
}

impl Layer for Linear {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.apply(&as_matrix(x)).into_dyn()
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainCtx) -> Tensor {
        let x = as_matrix(x);
        let y = self.apply(&x);
        self.input = Some(x);
        y.into_dyn()
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("Linear::backward without forward");
        let g = grad_out.view().into_dimensionality::<Ix2>().expect("linear grad is 2-D");
        if self.weight.trainable {
            let dw = g.t().dot(&x);
            self.weight.grad += &dw.into_dyn();
            self.bias.grad += &g.sum_axis(Axis(0)).into_dyn();
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        g.dot(&w).into_dyn()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
        f(join(prefix, "bias"), Slot::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(join(prefix, "bias"), SlotMut::Param(&mut self.bias));
    }
}

#[derive(Debug, Default)]
pub struct Relu {
    mask: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn infer(&self, x: &Tensor) -> Tensor {
        x.mapv(|v| v.max(0.0))
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainCtx) -> Tensor {
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("Relu::backward without forward");
        grad_out * &mask
    }
}

/// Inverted dropout: identity at inference, scaled Bernoulli mask in training.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    mask: Option<Tensor>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Self { rate, mask: None }
    }
}

impl Layer for Dropout {
    fn infer(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx) -> Tensor {
        if self.rate == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let mask =
            Tensor::from_shape_fn(x.raw_dim(), |_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        match self.mask.take() {
            Some(mask) => grad_out * &mask,
            None => grad_out.clone(),
        }
    }
}

/// Two 3×3 convolutions with a skip connection; the skip is projected by a
/// strided 1×1 convolution when the shape changes.
#[derive(Debug)]
pub struct ResidualBlock {
    body: Sequential,
    shortcut: Option<Sequential>,
    out_relu: Relu,
}

impl ResidualBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut body = Sequential::new();
        body.push(Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng));
        body.push(BatchNorm::new(out_ch));
        body.push(Relu::new());
        body.push(Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng));
        body.push(BatchNorm::new(out_ch));
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            let mut s = Sequential::new();
            s.push(Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng));
            s.push(BatchNorm::new(out_ch));
            s
        });
        Self { body, shortcut, out_relu: Relu::new() }
    }
}

impl Layer for ResidualBlock {
    fn infer(&self, x: &Tensor) -> Tensor {
        let skip = match &self.shortcut {
            Some(s) => s.infer(x),
            None => x.clone(),
        };
        self.out_relu.infer(&(self.body.infer(x) + skip))
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx) -> Tensor {
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x, ctx),
            None => x.clone(),
        };
        let main = self.body.forward(x, ctx);
        self.out_relu.forward(&(main + skip), ctx)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.out_relu.backward(grad_out);
        let gx = self.body.backward(&g);
        let gskip = match &mut self.shortcut {
            Some(s) => s.backward(&g),
            None => g,
        };
        gx + gskip
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.body.visit(&join(prefix, "body"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        self.body.visit_mut(&join(prefix, "body"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}
