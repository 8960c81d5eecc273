//! Trainable layers. Each layer owns its parameters, accumulated gradients
//! and whatever it cached during the last training-mode forward pass.
//! `infer` is a pure forward that never touches the cache, so models in
//! inference mode can be shared read-only across threads.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvCache, ConvSpec};
use super::{Param, Tensor};
use crate::exec::ExecMode;

pub trait Layer: Send {
    /// Training-mode forward; caches whatever `backward` will need.
    fn forward(&mut self, x: &Tensor, mode: ExecMode) -> Tensor;
    /// Pure inference forward.
    fn infer(&self, x: &Tensor, mode: ExecMode) -> Tensor;
    /// Backpropagate, accumulating parameter gradients, returning the
    /// gradient with respect to this layer's input.
    fn backward(&mut self, grad: &Tensor, mode: ExecMode) -> Tensor;
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
    fn visit_params_ref(&self, _f: &mut dyn FnMut(&Param)) {}
    /// Downcast hooks for the one layer type that carries extra
    /// (non-parameter) state.
    fn as_bn(&self) -> Option<&BatchNorm> {
        None
    }
    fn as_bn_mut(&mut self) -> Option<&mut BatchNorm> {
        None
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let std = (2.0 / fan_in as f64).sqrt();
    move || {
        // Box-Muller from two uniform draws.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct Linear {
    pub weight: Param, // (out, in)
    pub bias: Param,   // (out,)
    cached_input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut gen = he_normal(rng, in_dim);
        let w = ArrayD::from_shape_fn(IxDyn(&[out_dim, in_dim]), |_| gen());
        Linear {
            weight: Param::new(w),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out_dim]))),
            cached_input: None,
        }
    }

    fn w2(&self) -> Array2<f64> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("linear weight rank")
            .to_owned()
    }

    fn apply(&self, x: &Array2<f64>, mode: ExecMode) -> Array2<f64> {
        let w = self.w2();
        let mut y = crate::exec::matmul(mode, x.view(), w.t());
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias rank");
        for mut row in y.rows_mut() {
            row += &b;
        }
        y
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, mode: ExecMode) -> Tensor {
        let x2 = x.as_d2();
        self.cached_input = Some(x2.clone());
        Tensor::D2(self.apply(x2, mode))
    }

    fn infer(&self, x: &Tensor, mode: ExecMode) -> Tensor {
        Tensor::D2(self.apply(x.as_d2(), mode))
    }

    fn backward(&mut self, grad: &Tensor, mode: ExecMode) -> Tensor {
        let g = grad.as_d2();
        let x = self.cached_input.as_ref().expect("forward before backward");
        let gw = crate::exec::matmul(mode, g.t(), x.view()); // (out, in)
        self.weight.grad += &gw.into_dyn();
        self.bias.grad += &g.sum_axis(Axis(0)).into_dyn();
        let w = self.w2();
        Tensor::D2(crate::exec::matmul(mode, g.view(), w.view()))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
}

// ---------------------------------------------------------------------------
// Conv2d / ConvTranspose2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub weight: Param, // (Cout, Cin, k, k)
    pub bias: Param,   // (Cout,)
    pub spec: ConvSpec,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * spec.kernel * spec.kernel;
        let mut gen = he_normal(rng, fan_in);
        let w = ArrayD::from_shape_fn(IxDyn(&[out_ch, in_ch, spec.kernel, spec.kernel]), |_| {
            gen()
        });
        Conv2d {
            weight: Param::new(w),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out_ch]))),
            spec,
            cache: None,
        }
    }

    fn w4(&self) -> Array4<f64> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("conv weight rank")
            .to_owned()
    }

    fn b1(&self) -> Array1<f64> {
        self.bias
            .value
            .view()
            .into_dimensionality()
            .expect("bias rank")
            .to_owned()
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: ExecMode) -> Tensor {
        let w = self.w4();
        let b = self.b1();
        let (y, cache) = kernels::conv2d_forward(mode, &x.as_d4().view(), &w.view(), Some(&b), self.spec);
        self.cache = Some(cache);
        Tensor::D4(y)
    }

    fn infer(&self, x: &Tensor, mode: ExecMode) -> Tensor {
        let w = self.w4();
        let b = self.b1();
        let (y, _) = kernels::conv2d_forward(mode, &x.as_d4().view(), &w.view(), Some(&b), self.spec);
        Tensor::D4(y)
    }

    fn backward(&mut self, grad: &Tensor, mode: ExecMode) -> Tensor {
        let cache = self.cache.as_ref().expect("forward before backward");
        let w = self.w4();
        let (gx, gw, gb) =
            kernels::conv2d_backward(mode, cache, &w.view(), &grad.as_d4().view(), self.spec);
        self.weight.grad += &gw.into_dyn();
        self.bias.grad += &gb.into_dyn();
        Tensor::D4(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
}

pub struct ConvTranspose2d {
    pub weight: Param, // (Cin, Cout, k, k)
    pub bias: Param,   // (Cout,)
    pub spec: ConvSpec,
    cached_input: Option<Array4<f64>>,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * spec.kernel * spec.kernel;
        let mut gen = he_normal(rng, fan_in);
        let w = ArrayD::from_shape_fn(IxDyn(&[in_ch, out_ch, spec.kernel, spec.kernel]), |_| {
            gen()
        });
        ConvTranspose2d {
            weight: Param::new(w),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out_ch]))),
            spec,
            cached_input: None,
        }
    }

    fn w4(&self) -> Array4<f64> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("tconv weight rank")
            .to_owned()
    }

    fn b1(&self) -> Array1<f64> {
        self.bias
            .value
            .view()
            .into_dimensionality()
            .expect("bias rank")
            .to_owned()
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&mut self, x: &Tensor, mode: ExecMode) -> Tensor {
        let x4 = x.as_d4();
        self.cached_input = Some(x4.clone());
        let w = self.w4();
        let b = self.b1();
        Tensor::D4(kernels::tconv2d_forward(mode, &x4.view(), &w.view(), Some(&b), self.spec))
    }

    fn infer(&self, x: &Tensor, mode: ExecMode) -> Tensor {
        let w = self.w4();
        let b = self.b1();
        Tensor::D4(kernels::tconv2d_forward(
            mode,
            &x.as_d4().view(),
            &w.view(),
            Some(&b),
            self.spec,
        ))
    }

    fn backward(&mut self, grad: &Tensor, mode: ExecMode) -> Tensor {
        let x = self.cached_input.as_ref().expect("forward before backward");
        let w = self.w4();
        let (gx, gw, gb) =
            kernels::tconv2d_backward(mode, &x.view(), &w.view(), &grad.as_d4().view(), self.spec);
        self.weight.grad += &gw.into_dyn();
        self.bias.grad += &gb.into_dyn();
        Tensor::D4(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Normalizes per feature (rank-2 input) or per channel (rank-4 input).
/// Training mode uses batch statistics and updates running estimates;
/// inference uses the running estimates.
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    x_hat: ArrayD<f64>,
    inv_std: Array1<f64>,
    was_d4: bool,
    d4_shape: (usize, usize, usize, usize),
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[features]), 1.0)),
            beta: Param::new(ArrayD::zeros(IxDyn(&[features]))),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    /// View input as (N, C) rows where N collapses batch and spatial dims.
    fn to_rows(x: &Tensor, mode: ExecMode) -> (Array2<f64>, bool, (usize, usize, usize, usize)) {
        match x {
            Tensor::D2(a) => (a.clone(), false, (0, 0, 0, 0)),
            Tensor::D4(a) => {
                let shape = a.dim();
                (kernels::nchw_to_rows(mode, &a.view()), true, shape)
            }
        }
    }

    fn from_rows(
        rows: Array2<f64>,
        was_d4: bool,
        shape: (usize, usize, usize, usize),
        mode: ExecMode,
    ) -> Tensor {
        if was_d4 {
            Tensor::D4(kernels::rows_to_nchw(mode, &rows.view(), shape))
        } else {
            Tensor::D2(rows)
        }
    }

    fn gamma1(&self) -> Array1<f64> {
        self.gamma
            .value
            .view()
            .into_dimensionality()
            .expect("gamma rank")
            .to_owned()
    }

    fn beta1(&self) -> Array1<f64> {
        self.beta
            .value
            .view()
            .into_dimensionality()
            .expect("beta rank")
            .to_owned()
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor, mode: ExecMode) -> Tensor {
        let (rows, was_d4, shape) = Self::to_rows(x, mode);
        let n = rows.nrows() as f64;
        let mean = rows.mean_axis(Axis(0)).expect("nonempty batch");
        let var = rows.var_axis(Axis(0), 0.0); // biased
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut x_hat = rows;
        for mut row in x_hat.rows_mut() {
            row -= &mean;
            row *= &inv_std;
        }
        self.running_mean = &self.running_mean * self.momentum + &(&mean * (1.0 - self.momentum));
        self.running_var = &self.running_var * self.momentum + &(&var * (1.0 - self.momentum));
        let gamma = self.gamma1();
        let beta = self.beta1();
        let mut y = x_hat.clone();
        for mut row in y.rows_mut() {
            row *= &gamma;
            row += &beta;
        }
        let _ = n;
        self.cache = Some(BnCache {
            x_hat: x_hat.into_dyn(),
            inv_std,
            was_d4,
            d4_shape: shape,
        });
        Self::from_rows(y, was_d4, shape, mode)
    }

    fn infer(&self, x: &Tensor, mode: ExecMode) -> Tensor {
        let (rows, was_d4, shape) = Self::to_rows(x, mode);
        let gamma = self.gamma1();
        let beta = self.beta1();
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut y = rows;
        for mut row in y.rows_mut() {
            row -= &self.running_mean;
            row *= &inv_std;
            row *= &gamma;
            row += &beta;
        }
        Self::from_rows(y, was_d4, shape, mode)
    }

    fn backward(&mut self, grad: &Tensor, mode: ExecMode) -> Tensor {
        let cache = self.cache.as_ref().expect("forward before backward");
        let (g_rows, was_d4, _shape) = Self::to_rows(grad, mode);
        debug_assert_eq!(was_d4, cache.was_d4);
        let x_hat: Array2<f64> = cache
            .x_hat
            .view()
            .into_dimensionality()
            .expect("cache rank")
            .to_owned();
        let n = g_rows.nrows() as f64;
        let gamma = self.gamma1();

        let d_gamma = (&g_rows * &x_hat).sum_axis(Axis(0));
        let d_beta = g_rows.sum_axis(Axis(0));
        self.gamma.grad += &d_gamma.clone().into_dyn();
        self.beta.grad += &d_beta.clone().into_dyn();

        // dx = gamma * inv_std / N * (N*g - sum(g) - x_hat * sum(g*x_hat))
        let mut dx = &g_rows * n;
        for mut row in dx.rows_mut() {
            row -= &d_beta;
        }
        let correction = &x_hat * &d_gamma; // row-wise broadcast multiply
        dx -= &correction;
        let scale = &gamma * &cache.inv_std / n;
        for mut row in dx.rows_mut() {
            row *= &scale;
        }
        Self::from_rows(dx, cache.was_d4, cache.d4_shape, mode)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn as_bn(&self) -> Option<&BatchNorm> {
        Some(self)
    }

    fn as_bn_mut(&mut self) -> Option<&mut BatchNorm> {
        Some(self)
    }
}

// ---------------------------------------------------------------------------
// Activations and shape plumbing
// ---------------------------------------------------------------------------

pub struct LeakyRelu {
    pub alpha: f64,
    cached_mask: Option<ArrayD<f64>>,
}

impl LeakyRelu {
    pub fn new(alpha: f64) -> Self {
        LeakyRelu { alpha, cached_mask: None }
    }

    fn apply(&self, x: &Tensor) -> (Tensor, ArrayD<f64>) {
        let (y, mask) = match x {
            Tensor::D2(a) => {
                let mask = a.mapv(|v| if v > 0.0 { 1.0 } else { self.alpha });
                (Tensor::D2(a * &mask), mask.into_dyn())
            }
            Tensor::D4(a) => {
                let mask = a.mapv(|v| if v > 0.0 { 1.0 } else { self.alpha });
                (Tensor::D4(a * &mask), mask.into_dyn())
            }
        };
        (y, mask)
    }
}

impl Layer for LeakyRelu {
    fn forward(&mut self, x: &Tensor, _mode: ExecMode) -> Tensor {
        let (y, mask) = self.apply(x);
        self.cached_mask = Some(mask);
        y
    }

    fn infer(&self, x: &Tensor, _mode: ExecMode) -> Tensor {
        self.apply(x).0
    }

    fn backward(&mut self, grad: &Tensor, _mode: ExecMode) -> Tensor {
        let mask = self.cached_mask.as_ref().expect("forward before backward");
        match grad {
            Tensor::D2(g) => {
                let m: ndarray::ArrayView2<f64> =
                    mask.view().into_dimensionality().expect("mask rank");
                Tensor::D2(g * &m)
            }
            Tensor::D4(g) => {
                let m: ndarray::ArrayView4<f64> =
                    mask.view().into_dimensionality().expect("mask rank");
                Tensor::D4(g * &m)
            }
        }
    }
}

pub struct Sigmoid {
    cached_output: Option<ArrayD<f64>>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid { cached_output: None }
    }

    fn apply(x: &Tensor) -> Tensor {
        match x {
            Tensor::D2(a) => Tensor::D2(a.mapv(crate::nn::ops::sigmoid)),
            Tensor::D4(a) => Tensor::D4(a.mapv(crate::nn::ops::sigmoid)),
        }
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: &Tensor, _mode: ExecMode) -> Tensor {
        let y = Self::apply(x);
        self.cached_output = Some(match &y {
            Tensor::D2(a) => a.clone().into_dyn(),
            Tensor::D4(a) => a.clone().into_dyn(),
        });
        y
    }

    fn infer(&self, x: &Tensor, _mode: ExecMode) -> Tensor {
        Self::apply(x)
    }

    fn backward(&mut self, grad: &Tensor, _mode: ExecMode) -> Tensor {
        let y = self.cached_output.as_ref().expect("forward before backward");
        let dy = y.mapv(|v| v * (1.0 - v));
        match grad {
            Tensor::D2(g) => {
                let d: ndarray::ArrayView2<f64> =
                    dy.view().into_dimensionality().expect("rank");
                Tensor::D2(g * &d)
            }
            Tensor::D4(g) => {
                let d: ndarray::ArrayView4<f64> =
                    dy.view().into_dimensionality().expect("rank");
                Tensor::D4(g * &d)
            }
        }
    }
}

/// Mean over the spatial dimensions: (B, C, H, W) -> (B, C).
pub struct GlobalAvgPool {
    cached_shape: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cached_shape: None }
    }

    fn apply(x: &Array4<f64>) -> Array2<f64> {
        let (b, c, h, w) = x.dim();
        let mut y = Array2::<f64>::zeros((b, c));
        for n in 0..b {
            for ci in 0..c {
                y[[n, ci]] = x.index_axis(Axis(0), n).index_axis(Axis(0), ci).sum()
                    / (h * w) as f64;
            }
        }
        y
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _mode: ExecMode) -> Tensor {
        let x4 = x.as_d4();
        self.cached_shape = Some(x4.dim());
        Tensor::D2(Self::apply(x4))
    }

    fn infer(&self, x: &Tensor, _mode: ExecMode) -> Tensor {
        Tensor::D2(Self::apply(x.as_d4()))
    }

    fn backward(&mut self, grad: &Tensor, _mode: ExecMode) -> Tensor {
        let (b, c, h, w) = self.cached_shape.expect("forward before backward");
        let g = grad.as_d2();
        let scale = 1.0 / (h * w) as f64;
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for n in 0..b {
            for ci in 0..c {
                out.index_axis_mut(Axis(0), n)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g[[n, ci]] * scale);
            }
        }
        Tensor::D4(out)
    }
}

/// Reshape rank-2 rows into (C, H, W) maps and back.
pub struct ToImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Layer for ToImage {
    fn forward(&mut self, x: &Tensor, mode: ExecMode) -> Tensor {
        self.infer(x, mode)
    }

    fn infer(&self, x: &Tensor, _mode: ExecMode) -> Tensor {
        let x2 = x.as_d2();
        let b = x2.nrows();
        Tensor::D4(
            x2.clone()
                .into_shape_with_order((b, self.channels, self.height, self.width))
                .expect("row length must equal c*h*w"),
        )
    }

    fn backward(&mut self, grad: &Tensor, _mode: ExecMode) -> Tensor {
        let g = grad.as_d4();
        let (b, c, h, w) = g.dim();
        Tensor::D2(
            g.clone()
                .into_shape_with_order((b, c * h * w))
                .expect("contiguous"),
        )
    }
}

// ---------------------------------------------------------------------------
// Sequential
// ---------------------------------------------------------------------------

/// An ordered chain of layers (the only graph shape the models here need).
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, x: &Tensor, mode: ExecMode) -> Tensor {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode);
        }
        cur
    }

    pub fn infer(&self, x: &Tensor, mode: ExecMode) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur, mode);
        }
        cur
    }

    pub fn backward(&mut self, grad: &Tensor, mode: ExecMode) -> Tensor {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur, mode);
        }
        cur
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        for layer in &self.layers {
            layer.visit_params_ref(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |p| n += p.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::default_mode;
    use ndarray::Array;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    /// Finite-difference check of parameter and input gradients for an
    /// arbitrary layer, using a random linear scalar objective.
    fn fd_check(layer: &mut dyn Layer, x: Tensor, tol: f64) {
        let mode = ExecMode::Sequential;
        let y = layer.forward(&x, mode);
        let coeff = match &y {
            Tensor::D2(a) => {
                Tensor::D2(Array::from_shape_fn(a.dim(), |(i, j)| {
                    ((i * 7 + j * 3) as f64 * 0.7).sin()
                }))
            }
            Tensor::D4(a) => Tensor::D4(Array::from_shape_fn(a.dim(), |(i, j, k, l)| {
                ((i * 31 + j * 17 + k * 5 + l) as f64 * 0.7).sin()
            })),
        };
        let dot = |a: &Tensor, b: &Tensor| match (a, b) {
            (Tensor::D2(x), Tensor::D2(y)) => (x * y).sum(),
            (Tensor::D4(x), Tensor::D4(y)) => (x * y).sum(),
            _ => unreachable!(),
        };
        layer.visit_params(&mut |p| p.zero_grad());
        let gx = layer.backward(&coeff, mode);

        // Parameter gradients.
        let mut param_idx = 0usize;
        loop {
            let mut n_params = 0;
            layer.visit_params(&mut |_| n_params += 1);
            if param_idx >= n_params {
                break;
            }
            // probe a couple of coordinates per parameter
            let mut len = 0;
            let mut analytic = Vec::new();
            {
                let mut i = 0;
                layer.visit_params(&mut |p| {
                    if i == param_idx {
                        len = p.len();
                        analytic = p.grad.iter().copied().collect();
                    }
                    i += 1;
                });
            }
            let h = 1e-6;
            fn bump(layer: &mut dyn Layer, which: usize, coord: usize, delta: f64) {
                let mut i = 0;
                layer.visit_params(&mut |p| {
                    if i == which {
                        let flat = p.value.as_slice_mut().expect("contiguous");
                        flat[coord] += delta;
                    }
                    i += 1;
                });
            }
            for probe in [0, len / 2, len.saturating_sub(1)] {
                if probe >= len {
                    continue;
                }
                bump(layer, param_idx, probe, h);
                let up = dot(&layer.forward(&x, mode), &coeff);
                bump(layer, param_idx, probe, -2.0 * h);
                let down = dot(&layer.forward(&x, mode), &coeff);
                bump(layer, param_idx, probe, h);
                let fd = (up - down) / (2.0 * h);
                let got = analytic[probe];
                assert!(
                    (got - fd).abs() <= tol * (1.0 + fd.abs()),
                    "param {param_idx} coord {probe}: analytic {got} vs fd {fd}"
                );
            }
            param_idx += 1;
        }

        // Input gradient (probe three coordinates).
        let h = 1e-6;
        let probe_input = |x: &Tensor, i: usize, delta: f64| -> Tensor {
            match x {
                Tensor::D2(a) => {
                    let mut b = a.clone();
                    b.as_slice_mut().unwrap()[i] += delta;
                    Tensor::D2(b)
                }
                Tensor::D4(a) => {
                    let mut b = a.clone();
                    b.as_slice_mut().unwrap()[i] += delta;
                    Tensor::D4(b)
                }
            }
        };
        let xlen = match &x {
            Tensor::D2(a) => a.len(),
            Tensor::D4(a) => a.len(),
        };
        let gx_flat: Vec<f64> = match &gx {
            Tensor::D2(a) => a.iter().copied().collect(),
            Tensor::D4(a) => a.iter().copied().collect(),
        };
        // restore caches for the original input before probing
        for probe in [0, xlen / 2, xlen - 1] {
            let up = dot(&layer.forward(&probe_input(&x, probe, h), mode), &coeff);
            let down = dot(&layer.forward(&probe_input(&x, probe, -h), mode), &coeff);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (gx_flat[probe] - fd).abs() <= tol * (1.0 + fd.abs()),
                "input coord {probe}: analytic {} vs fd {fd}",
                gx_flat[probe]
            );
        }
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut layer = Linear::new(5, 4, &mut r);
        let x = Tensor::D2(Array::from_shape_fn((3, 5), |(i, j)| {
            ((i + 2 * j) as f64 * 0.31).cos()
        }));
        fd_check(&mut layer, x, 1e-5);
    }

    #[test]
    fn conv_layer_gradients() {
        let mut r = rng();
        let mut layer = Conv2d::new(2, 3, ConvSpec { kernel: 3, stride: 2, pad: 1 }, &mut r);
        let x = Tensor::D4(Array::from_shape_fn((2, 2, 6, 6), |(a, b, c, d)| {
            ((a * 3 + b * 5 + c * 7 + d) as f64 * 0.13).sin()
        }));
        fd_check(&mut layer, x, 1e-5);
    }

    #[test]
    fn tconv_layer_gradients() {
        let mut r = rng();
        let mut layer =
            ConvTranspose2d::new(3, 2, ConvSpec { kernel: 4, stride: 2, pad: 1 }, &mut r);
        let x = Tensor::D4(Array::from_shape_fn((2, 3, 3, 3), |(a, b, c, d)| {
            ((a + b * 2 + c * 3 + d * 4) as f64 * 0.17).sin()
        }));
        fd_check(&mut layer, x, 1e-5);
    }

    #[test]
    fn batchnorm_gradients_2d() {
        let mut layer = BatchNorm::new(4);
        let x = Tensor::D2(Array::from_shape_fn((6, 4), |(i, j)| {
            ((i * 5 + j) as f64 * 0.23).sin() * 2.0 + 0.5
        }));
        fd_check(&mut layer, x, 1e-4);
    }

    #[test]
    fn batchnorm_gradients_4d() {
        let mut layer = BatchNorm::new(3);
        let x = Tensor::D4(Array::from_shape_fn((2, 3, 4, 4), |(a, b, c, d)| {
            ((a * 11 + b * 7 + c * 3 + d) as f64 * 0.19).cos()
        }));
        fd_check(&mut layer, x, 1e-4);
    }

    #[test]
    fn leaky_relu_and_sigmoid_gradients() {
        let x = Tensor::D2(Array::from_shape_fn((4, 6), |(i, j)| {
            ((i * 3 + j) as f64 * 0.41).sin()
        }));
        fd_check(&mut LeakyRelu::new(0.1), x.clone(), 1e-5);
        fd_check(&mut Sigmoid::new(), x, 1e-5);
    }

    #[test]
    fn pool_and_reshape_gradients() {
        let x = Tensor::D4(Array::from_shape_fn((2, 3, 4, 4), |(a, b, c, d)| {
            ((a + b + c + d) as f64 * 0.11).sin()
        }));
        fd_check(&mut GlobalAvgPool::new(), x, 1e-5);
        let x2 = Tensor::D2(Array::from_shape_fn((2, 12), |(i, j)| (i + j) as f64 * 0.1));
        fd_check(
            &mut ToImage { channels: 3, height: 2, width: 2 },
            x2,
            1e-5,
        );
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let mut layer = BatchNorm::new(2);
        let x = Array::from_shape_fn((64, 2), |(i, j)| i as f64 * 0.1 + j as f64 * 3.0);
        let y = layer.forward(&Tensor::D2(x), default_mode());
        let y = y.as_d2();
        let mean = y.mean_axis(Axis(0)).unwrap();
        let var = y.var_axis(Axis(0), 0.0);
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
