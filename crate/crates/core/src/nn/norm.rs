use ndarray::{Array1, Array2, Axis, Ix1};

use super::{join, Layer, Param, Slot, SlotMut, Tensor, TrainCtx};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis (axis 1) of `N × C` or
/// `N × C × H × W` input.
#[derive(Debug)]
pub struct BatchNorm {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<NormCache>,
}

#[derive(Debug)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    shape: Vec<usize>,
}

/// Rearranges `x` into `C × L` where `L` pools batch and spatial positions.
fn to_channel_rows(x: &Tensor) -> Array2<f64> {
    let c = x.shape()[1];
    let mut axes: Vec<usize> = (0..x.ndim()).collect();
    axes.swap(0, 1);
    let moved = x.view().permuted_axes(axes).as_standard_layout().into_owned();
    let l = moved.len() / c;
    moved.into_shape_with_order((c, l)).unwrap()
}

fn from_channel_rows(rows: Array2<f64>, shape: &[usize]) -> Tensor {
    let mut moved_shape = shape.to_vec();
    moved_shape.swap(0, 1);
    let moved = rows.into_shape_with_order(moved_shape).unwrap();
    let mut axes: Vec<usize> = (0..shape.len()).collect();
    axes.swap(0, 1);
    moved.permuted_axes(axes).as_standard_layout().into_owned()
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::new(Tensor::ones(vec![channels])),
            bias: Param::new(Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            cache: None,
        }
    }

    fn affine(&self, xhat: &Array2<f64>) -> Array2<f64> {
        let g = self.weight.value.view().into_dimensionality::<Ix1>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xhat.clone();
        for (mut row, (&gc, &bc)) in y.axis_iter_mut(Axis(0)).zip(g.iter().zip(b.iter())) {
            row.mapv_inplace(|v| v * gc + bc);
        }
        y
    }
}

impl Layer for BatchNorm {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut rows = to_channel_rows(x);
        let mean = self.running_mean.view().into_dimensionality::<Ix1>().unwrap();
        let var = self.running_var.view().into_dimensionality::<Ix1>().unwrap();
        for (c, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
            let inv = 1.0 / (var[c] + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean[c]) * inv);
        }
        from_channel_rows(self.affine(&rows), x.shape())
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainCtx) -> Tensor {
        let rows = to_channel_rows(x);
        let l = rows.ncols() as f64;
        let mean = rows.mean_axis(Axis(1)).unwrap();
        let centered = &rows - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));

        let unbiased = if l > 1.0 { &var * (l / (l - 1.0)) } else { var.clone() };
        self.running_mean = (&self.running_mean * (1.0 - MOMENTUM)) + &(mean * MOMENTUM).into_dyn();
        self.running_var = (&self.running_var * (1.0 - MOMENTUM)) + &(unbiased * MOMENTUM).into_dyn();

        let y = from_channel_rows(self.affine(&xhat), x.shape());
        self.cache = Some(NormCache { xhat, inv_std, shape: x.shape().to_vec() });
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let NormCache { xhat, inv_std, shape } = self.cache.take().expect("BatchNorm::backward without forward");
        let dy = to_channel_rows(grad_out);
        let l = dy.ncols() as f64;
        let gamma = self.weight.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let sum_dy = dy.sum_axis(Axis(1));
        let sum_dy_xhat = (&dy * &xhat).sum_axis(Axis(1));
        if self.weight.trainable {
            self.weight.grad += &sum_dy_xhat.clone().into_dyn();
            self.bias.grad += &sum_dy.clone().into_dyn();
        }
        let mut dx = Array2::<f64>::zeros(dy.raw_dim());
        for c in 0..dy.nrows() {
            let k = gamma[c] * inv_std[c] / l;
            let (s1, s2) = (sum_dy[c], sum_dy_xhat[c]);
            for j in 0..dy.ncols() {
                dx[[c, j]] = k * (l * dy[[c, j]] - s1 - xhat[[c, j]] * s2);
            }
        }
        from_channel_rows(dx, &shape)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
        f(join(prefix, "bias"), Slot::Param(&self.bias));
        f(join(prefix, "running_mean"), Slot::Buffer(&self.running_mean));
        f(join(prefix, "running_var"), Slot::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(join(prefix, "bias"), SlotMut::Param(&mut self.bias));
        f(join(prefix, "running_mean"), SlotMut::Buffer(&mut self.running_mean));
        f(join(prefix, "running_var"), SlotMut::Buffer(&mut self.running_var));
    }
}
