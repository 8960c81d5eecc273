//! Pure convolution kernels: im2col/col2im lowering plus the GEMM
//! compositions for forward, input-gradient and weight-gradient passes.
//! These are free functions so both the layer types and the frozen style
//! network share one implementation, and so the bench suite can compare
//! sequential and parallel execution directly.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

use crate::exec::{self, ExecMode};

/// Spatial geometry of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output size of the transposed convolution with this geometry.
    pub fn transpose_out_size(&self, in_size: usize) -> usize {
        (in_size - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

/// Unfold `x` (B, C, H, W) into patch rows: one row per output position,
/// `C * k * k` values per row. Out-of-bounds taps contribute zeros.
pub fn im2col(mode: ExecMode, x: &ArrayView4<f64>, spec: ConvSpec) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    let patch = c * spec.kernel * spec.kernel;
    let mut cols = Array2::<f64>::zeros((b * oh * ow, patch));
    let rows_per_item = oh * ow;
    exec::for_each_row_chunk(mode, &mut cols, rows_per_item, |n, mut chunk| {
        let xs = x.index_axis(Axis(0), n);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                let mut col = 0usize;
                for ci in 0..c {
                    let plane = xs.index_axis(Axis(0), ci);
                    for ky in 0..spec.kernel {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        for kx in 0..spec.kernel {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                chunk[[row, col]] = plane[[iy as usize, ix as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Fold patch rows back into an image by scatter-add: the adjoint of
/// [`im2col`]. `shape` is the (B, C, H, W) of the result.
pub fn col2im(
    mode: ExecMode,
    cols: &ArrayView2<f64>,
    shape: (usize, usize, usize, usize),
    spec: ConvSpec,
) -> Array4<f64> {
    let (b, c, h, w) = shape;
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    debug_assert_eq!(cols.nrows(), b * oh * ow);
    // One sample per row chunk: the batch dimension gives disjoint writes.
    let per_sample = c * h * w;
    let mut flat = Array2::<f64>::zeros((b, per_sample));
    exec::for_each_row_chunk(mode, &mut flat, 1, |n, mut row| {
        let img = row.as_slice_mut().expect("contiguous row");
        for oy in 0..oh {
            for ox in 0..ow {
                let r = n * oh * ow + oy * ow + ox;
                let mut col = 0usize;
                for ci in 0..c {
                    for ky in 0..spec.kernel {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        for kx in 0..spec.kernel {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                img[ci * h * w + iy as usize * w + ix as usize] += cols[[r, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    });
    flat.into_shape_with_order(shape).expect("same length")
}

/// (B, C, H, W) -> (B*H*W, C) row-major over (sample, y, x).
pub fn nchw_to_rows(mode: ExecMode, x: &ArrayView4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let mut rows = Array2::<f64>::zeros((b * h * w, c));
    exec::for_each_row_chunk(mode, &mut rows, h * w, |n, mut chunk| {
        let xs = x.index_axis(Axis(0), n);
        for ci in 0..c {
            let plane = xs.index_axis(Axis(0), ci);
            for y in 0..h {
                for xcol in 0..w {
                    chunk[[y * w + xcol, ci]] = plane[[y, xcol]];
                }
            }
        }
    });
    rows
}

/// Inverse of [`nchw_to_rows`].
pub fn rows_to_nchw(
    mode: ExecMode,
    rows: &ArrayView2<f64>,
    shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (b, c, h, w) = shape;
    debug_assert_eq!(rows.nrows(), b * h * w);
    debug_assert_eq!(rows.ncols(), c);
    let mut flat = Array2::<f64>::zeros((b, c * h * w));
    exec::for_each_row_chunk(mode, &mut flat, 1, |n, mut row| {
        let img = row.as_slice_mut().expect("contiguous row");
        for y in 0..h {
            for xcol in 0..w {
                let r = n * h * w + y * w + xcol;
                for ci in 0..c {
                    img[ci * h * w + y * w + xcol] = rows[[r, ci]];
                }
            }
        }
    });
    flat.into_shape_with_order(shape).expect("same length")
}

/// Cached activations a convolution needs for its backward pass.
pub struct ConvCache {
    pub cols: Array2<f64>,
    pub in_shape: (usize, usize, usize, usize),
}

/// Convolution forward. Weight is (Cout, Cin, k, k); bias (Cout) optional.
pub fn conv2d_forward(
    mode: ExecMode,
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    spec: ConvSpec,
) -> (Array4<f64>, ConvCache) {
    let (b, c, h, w) = x.dim();
    let (cout, cin, kh, kw) = weight.dim();
    assert_eq!(c, cin, "conv2d: channel mismatch");
    assert_eq!(kh, spec.kernel);
    assert_eq!(kw, spec.kernel);
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    let cols = im2col(mode, x, spec);
    let w_mat = weight
        .to_shape((cout, cin * kh * kw))
        .expect("contiguous weight")
        .into_owned();
    // (B*OH*OW, patch) x (patch, Cout)
    let mut y_rows = exec::matmul(mode, cols.view(), w_mat.t());
    if let Some(bv) = bias {
        for mut row in y_rows.rows_mut() {
            row += bv;
        }
    }
    let y = rows_to_nchw(mode, &y_rows.view(), (b, cout, oh, ow));
    (
        y,
        ConvCache {
            cols,
            in_shape: (b, c, h, w),
        },
    )
}

/// Gradients of a convolution. Returns (grad_x, grad_w, grad_b).
pub fn conv2d_backward(
    mode: ExecMode,
    cache: &ConvCache,
    weight: &ArrayView4<f64>,
    grad_y: &ArrayView4<f64>,
    spec: ConvSpec,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (cout, cin, kh, kw) = weight.dim();
    let g_rows = nchw_to_rows(mode, grad_y); // (B*OH*OW, Cout)
    let w_mat = weight
        .to_shape((cout, cin * kh * kw))
        .expect("contiguous weight")
        .into_owned();
    let grad_w_mat = exec::matmul(mode, g_rows.t(), cache.cols.view()); // (Cout, patch)
    let grad_w = grad_w_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("same length");
    let grad_b = g_rows.sum_axis(Axis(0));
    let grad_cols = exec::matmul(mode, g_rows.view(), w_mat.view()); // (B*OH*OW, patch)
    let grad_x = col2im(mode, &grad_cols.view(), cache.in_shape, spec);
    (grad_x, grad_w, grad_b)
}

/// Input gradient only — used when the convolution's own weights are frozen
/// (style network) and computing their gradient would be wasted work.
pub fn conv2d_input_grad(
    mode: ExecMode,
    weight: &ArrayView4<f64>,
    grad_y: &ArrayView4<f64>,
    in_shape: (usize, usize, usize, usize),
    spec: ConvSpec,
) -> Array4<f64> {
    let (cout, cin, kh, kw) = weight.dim();
    let g_rows = nchw_to_rows(mode, grad_y);
    let w_mat = weight
        .to_shape((cout, cin * kh * kw))
        .expect("contiguous weight")
        .into_owned();
    let grad_cols = exec::matmul(mode, g_rows.view(), w_mat.view());
    col2im(mode, &grad_cols.view(), in_shape, spec)
}

/// Transposed-convolution forward. Weight is (Cin, Cout, k, k).
/// Implemented as the adjoint of [`conv2d_forward`]: GEMM then fold.
pub fn tconv2d_forward(
    mode: ExecMode,
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    spec: ConvSpec,
) -> Array4<f64> {
    let (b, cin, h, w) = x.dim();
    let (wcin, cout, kh, kw) = weight.dim();
    assert_eq!(cin, wcin, "tconv2d: channel mismatch");
    let (oh, ow) = (spec.transpose_out_size(h), spec.transpose_out_size(w));
    debug_assert_eq!(spec.out_size(oh), h, "tconv geometry must invert conv");
    let x_rows = nchw_to_rows(mode, x); // (B*H*W, Cin)
    let w_mat = weight
        .to_shape((wcin, cout * kh * kw))
        .expect("contiguous weight")
        .into_owned();
    let cols = exec::matmul(mode, x_rows.view(), w_mat.view()); // (B*H*W, Cout*k*k)
    let mut y = col2im(mode, &cols.view(), (b, cout, oh, ow), spec);
    if let Some(bv) = bias {
        for n in 0..b {
            for co in 0..cout {
                let mut plane = y.slice_mut(s![n, co, .., ..]);
                plane += bv[co];
            }
        }
    }
    y
}

/// Gradients of a transposed convolution. Returns (grad_x, grad_w, grad_b).
pub fn tconv2d_backward(
    mode: ExecMode,
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    grad_y: &ArrayView4<f64>,
    spec: ConvSpec,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (b, cin, h, w) = x.dim();
    let (_, cout, kh, kw) = weight.dim();
    let g_cols = im2col(mode, grad_y, spec); // (B*H*W, Cout*k*k)
    let x_rows = nchw_to_rows(mode, x); // (B*H*W, Cin)
    let w_mat = weight
        .to_shape((cin, cout * kh * kw))
        .expect("contiguous weight")
        .into_owned();
    let grad_x_rows = exec::matmul(mode, g_cols.view(), w_mat.t()); // (B*H*W, Cin)
    let grad_x = rows_to_nchw(mode, &grad_x_rows.view(), (b, cin, h, w));
    let grad_w_mat = exec::matmul(mode, x_rows.t(), g_cols.view()); // (Cin, Cout*k*k)
    let grad_w = grad_w_mat
        .into_shape_with_order((cin, cout, kh, kw))
        .expect("same length");
    let mut grad_b = Array1::<f64>::zeros(cout);
    for co in 0..cout {
        grad_b[co] = grad_y.slice(s![.., co, .., ..]).sum();
    }
    (grad_x, grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::default_mode;
    use ndarray::{Array, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randu4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Reference convolution: direct 7-deep loop.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: Option<&Array1<f64>>,
        spec: ConvSpec,
    ) -> Array4<f64> {
        let (bn, _c, h, wd) = x.dim();
        let (cout, cin, kh, kw) = w.dim();
        let (oh, ow) = (spec.out_size(h), spec.out_size(wd));
        let mut y = Array4::<f64>::zeros((bn, cout, oh, ow));
        for n in 0..bn {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |bv| bv[co]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x[[n, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[n, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let spec = ConvSpec { kernel: 3, stride, pad };
            let x = randu4(&mut rng, (2, 3, 8, 8));
            let w = randu4(&mut rng, (5, 3, 3, 3));
            let b = Array1::from_shape_fn(5, |i| i as f64 * 0.1 - 0.2);
            let (y, _) = conv2d_forward(default_mode(), &x.view(), &w.view(), Some(&b), spec);
            let want = conv_naive(&x, &w, Some(&b), spec);
            let err = (&y - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "stride {stride} pad {pad}: err {err}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
        let x = randu4(&mut rng, (2, 2, 6, 6));
        let w = randu4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_fn(3, |i| 0.05 * i as f64);
        // Scalar objective: weighted sum of outputs so every grad entry matters.
        let (y, cache) = conv2d_forward(default_mode(), &x.view(), &w.view(), Some(&b), spec);
        let coeff = randu4(&mut rng, y.dim());
        let (gx, gw, gb) = conv2d_backward(default_mode(), &cache, &w.view(), &coeff.view(), spec);

        let h = 1e-6;
        let eval = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| {
            let (y, _) = conv2d_forward(ExecMode::Sequential, &x.view(), &w.view(), Some(b), spec);
            (&y * &coeff).sum()
        };
        for idx in [(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xd = x.clone();
            xd[idx] -= h;
            let fd = (eval(&xp, &w, &b) - eval(&xd, &w, &b)) / (2.0 * h);
            assert!((gx[idx] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
        for idx in [(0, 0, 0, 0), (2, 1, 2, 2)] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wd = w.clone();
            wd[idx] -= h;
            let fd = (eval(&x, &wp, &b) - eval(&x, &wd, &b)) / (2.0 * h);
            assert!((gw[idx] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
        {
            let mut bp = b.clone();
            bp[1] += h;
            let mut bd = b.clone();
            bd[1] -= h;
            let fd = (eval(&x, &w, &bp) - eval(&x, &w, &bd)) / (2.0 * h);
            assert!((gb[1] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn tconv_doubles_spatial_size_and_inverts_conv_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let x = randu4(&mut rng, (2, 3, 4, 4));
        let w = randu4(&mut rng, (3, 5, 4, 4));
        let y = tconv2d_forward(default_mode(), &x.view(), &w.view(), None, spec);
        assert_eq!(y.dim(), (2, 5, 8, 8));

        // Adjoint identity: <tconv(x, w), u> == <x, conv(u, w)> where the same
        // (3,5,4,4) buffer is read as (Cin,Cout,k,k) on one side and
        // (Cout,Cin,k,k) on the other.
        let u = randu4(&mut rng, (2, 5, 8, 8));
        let lhs = (&y * &u).sum();
        let (v, _) = conv2d_forward(default_mode(), &u.view(), &w.view(), None, spec);
        let rhs = (&x * &v).sum();
        assert!((lhs - rhs).abs() < 1e-9, "adjoint mismatch {lhs} vs {rhs}");
    }

    #[test]
    fn tconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let x = randu4(&mut rng, (1, 2, 3, 3));
        let w = randu4(&mut rng, (2, 3, 4, 4));
        let b = Array1::from_shape_fn(3, |i| 0.1 * i as f64);
        let y = tconv2d_forward(default_mode(), &x.view(), &w.view(), Some(&b), spec);
        let coeff = randu4(&mut rng, y.dim());
        let (gx, gw, gb) =
            tconv2d_backward(default_mode(), &x.view(), &w.view(), &coeff.view(), spec);
        let h = 1e-6;
        let eval = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| {
            let y = tconv2d_forward(ExecMode::Sequential, &x.view(), &w.view(), Some(b), spec);
            (&y * &coeff).sum()
        };
        for idx in [(0, 0, 0, 0), (0, 1, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xd = x.clone();
            xd[idx] -= h;
            let fd = (eval(&xp, &w, &b) - eval(&xd, &w, &b)) / (2.0 * h);
            assert!((gx[idx] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
        for idx in [(0, 0, 0, 0), (1, 2, 3, 3)] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wd = w.clone();
            wd[idx] -= h;
            let fd = (eval(&x, &wp, &b) - eval(&x, &wd, &b)) / (2.0 * h);
            assert!((gw[idx] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
        {
            let mut bp = b.clone();
            bp[2] += h;
            let mut bd = b.clone();
            bd[2] -= h;
            let fd = (eval(&x, &w, &bp) - eval(&x, &w, &bd)) / (2.0 * h);
            assert!((gb[2] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn rows_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randu4(&mut rng, (3, 4, 5, 6));
        let rows = nchw_to_rows(default_mode(), &x.view());
        let back = rows_to_nchw(default_mode(), &rows.view(), (3, 4, 5, 6));
        assert_eq!(x, back);
    }
}
