use ndarray::{Array2, Array4, Axis, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;

use super::{join, uniform_init, Layer, Param, Slot, SlotMut, Tensor, TrainCtx};

/// 2-D convolution over `N × C × H × W` input, lowered to a matrix product
/// via im2col.
#[derive(Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug)]
struct ConvCache {
    cols: Array2<f64>,
    input_dim: [usize; 4],
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| Param::new(uniform_init(&[out_ch], fan_in, rng)));
        Self { weight, bias, kernel, stride, padding, cache: None }
    }

    fn out_ch(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        let s = self.stride;
        assert!(h + 2 * p >= k && w + 2 * p >= k, "input {h}x{w} smaller than kernel {k}");
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let o = self.out_ch();
        let cols = self.weight.value.len() / o;
        self.weight.value.view().into_shape_with_order((o, cols)).expect("contiguous weight").to_owned()
    }

    fn im2col(&self, x: &Array4<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let kk = c * k * k;
        let mut cols = Array2::<f64>::zeros((n * oh * ow, kk));
        let xs = x.as_slice().expect("standard layout input");
        let out = cols.as_slice_mut().unwrap();
        let (s, p) = (self.stride as isize, self.padding as isize);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * kk;
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        for ky in 0..k {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[row + (ch * k + ky) * k + kx] = xs[base + iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, dim: [usize; 4], oh: usize, ow: usize) -> Array4<f64> {
        let [n, c, h, w] = dim;
        let k = self.kernel;
        let kk = c * k * k;
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        let ds = dcols.as_slice().expect("standard layout");
        let (s, p) = (self.stride as isize, self.padding as isize);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * kk;
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        for ky in 0..k {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dxs[base + iy as usize * w + ix as usize] += ds[row + (ch * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn run(&self, x: &Tensor) -> (Tensor, ConvCache) {
        let x = x
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv input must be N x C x H x W")
            .as_standard_layout()
            .into_owned();
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(&x, oh, ow);
        let mut out = cols.dot(&self.weight_matrix().t());
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out += &b;
        }
        let y = out
            .into_shape_with_order((n, oh, ow, self.out_ch()))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let input_dim = [n, x.dim().1, h, w];
        (y, ConvCache { cols, input_dim, out_hw: (oh, ow) })
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x).0
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainCtx) -> Tensor {
        let (y, cache) = self.run(x);
        self.cache = Some(cache);
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("Conv2d::backward without forward");
        let (oh, ow) = cache.out_hw;
        let n = cache.input_dim[0];
        let o = self.out_ch();
        let g = grad_out
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * oh * ow, o))
            .unwrap();
        if self.weight.trainable {
            let dw = g.t().dot(&cache.cols);
            self.weight.grad += &dw.into_shape_with_order(self.weight.value.raw_dim()).unwrap();
            if let Some(b) = &mut self.bias {
                b.grad += &g.sum_axis(Axis(0)).into_dyn();
            }
        }
        let dcols = g.dot(&self.weight_matrix());
        self.col2im(&dcols, cache.input_dim, oh, ow).into_dyn()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), Slot::Param(b));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), SlotMut::Param(b));
        }
    }
}

/// Max pooling with square window; ties resolve to the first maximum.
#[derive(Debug)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding, cache: None }
    }

    fn run(&self, x: &Tensor) -> (Tensor, Vec<usize>, [usize; 4]) {
        let x =
            x.view().into_dimensionality::<Ix4>().expect("pool input must be 4-D").as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let xs = x.as_slice().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let os = out.as_slice_mut().unwrap();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xs[idx] > best || best_idx == usize::MAX {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    os[(plane * oh + oy) * ow + ox] = best;
                    argmax.push(best_idx);
                }
            }
        }
        (out.into_dyn(), argmax, [n, c, h, w])
    }
}

impl Layer for MaxPool2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x).0
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainCtx) -> Tensor {
        let (y, argmax, dim) = self.run(x);
        self.cache = Some((argmax, dim));
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (argmax, dim) = self.cache.take().expect("MaxPool2d::backward without forward");
        let mut dx = Array4::<f64>::zeros((dim[0], dim[1], dim[2], dim[3]));
        let dxs = dx.as_slice_mut().unwrap();
        let g = grad_out.as_standard_layout();
        for (&idx, &gv) in argmax.iter().zip(g.iter()) {
            dxs[idx] += gv;
        }
        dx.into_dyn()
    }
}

/// Averages each channel plane: `N × C × H × W → N × C`.
#[derive(Debug, Default)]
pub struct GlobalAvgPool {
    input_dim: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn infer(&self, x: &Tensor) -> Tensor {
        let x = x.view().into_dimensionality::<Ix4>().expect("pool input must be 4-D");
        let (n, c, h, w) = x.dim();
        let flat = x.as_standard_layout().into_owned().into_shape_with_order((n, c, h * w)).unwrap();
        flat.mean_axis(Axis(2)).unwrap().into_dyn()
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainCtx) -> Tensor {
        let s = x.shape();
        self.input_dim = Some([s[0], s[1], s[2], s[3]]);
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let [n, c, h, w] = self.input_dim.take().expect("GlobalAvgPool::backward without forward");
        let g = grad_out.view().into_dimensionality::<Ix2>().unwrap();
        let scale = 1.0 / (h * w) as f64;
        Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| g[[b, ch]] * scale).into_dyn()
    }
}
