//! Convolution, pooling, and activation primitives with hand-written
//! backward passes.
//!
//! Convolutions run as im2col plus a GEMM. Spatial padding is
//! zero-valued; temporal padding replicates the edge frames, so a clip
//! that is constant along time stays constant through every inflated
//! layer. All reductions are sequential, which keeps results
//! bit-reproducible.

use ndarray::{Array1, Array2, Array3, Array4, Array5, Axis};

use crate::{Error, Result};

/// Output extent of one axis under `floor((in + 2*pad - k) / stride) + 1`.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Config("kernel and stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn im2col_2d(
    x: &Array3<f64>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = kernel;
    let (oh, ow) = out;
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..oh {
                    let iy = (oy * stride.0 + i) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride.1 + j) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_2d(
    cols: &Array2<f64>,
    in_shape: (usize, usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array3<f64> {
    let (cin, h, w) = in_shape;
    let (kh, kw) = kernel;
    let (oh, ow) = out;
    let mut x = Array3::<f64>::zeros(in_shape);
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..oh {
                    let iy = (oy * stride.0 + i) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride.1 + j) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

/// 2D convolution with zero spatial padding.
pub fn conv2d_forward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Array3<f64>> {
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if x.shape()[0] != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects {cin} input channels, got {}",
            x.shape()[0]
        )));
    }
    let oh = out_extent(x.shape()[1], kh, stride.0, pad.0)?;
    let ow = out_extent(x.shape()[2], kw, stride.1, pad.1)?;
    let cols = im2col_2d(x, (kh, kw), stride, pad, (oh, ow));
    let w_mat = w
        .to_owned()
        .into_shape((cout, cin * kh * kw))
        .expect("conv weight reshape");
    let mut y_mat = w_mat.dot(&cols);
    for (mut row, &bias) in y_mat.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row += bias;
    }
    Ok(y_mat.into_shape((cout, oh, ow)).expect("conv output reshape"))
}

/// Gradients of 2D convolution w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    grad_y: &Array3<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (grad_y.shape()[1], grad_y.shape()[2]);
    let cols = im2col_2d(x, (kh, kw), stride, pad, (oh, ow));
    let gy_mat = grad_y
        .to_owned()
        .into_shape((cout, oh * ow))
        .expect("grad reshape");
    let grad_b = gy_mat.sum_axis(Axis(1));
    let grad_w = gy_mat
        .dot(&cols.t())
        .into_shape((cout, cin, kh, kw))
        .expect("grad_w reshape");
    let w_mat = w
        .to_owned()
        .into_shape((cout, cin * kh * kw))
        .expect("weight reshape");
    let grad_cols = w_mat.t().dot(&gy_mat);
    let grad_x = col2im_2d(
        &grad_cols,
        (x.shape()[0], x.shape()[1], x.shape()[2]),
        (kh, kw),
        stride,
        pad,
        (oh, ow),
    );
    (grad_x, grad_w, grad_b)
}

/// Clamped temporal index implementing edge replication; `None` means the
/// (spatially padded) sample is zero, which never happens along time.
#[inline]
fn replicate(idx: isize, len: usize) -> usize {
    idx.clamp(0, len as isize - 1) as usize
}

fn vol2col_3d(
    x: &Array4<f64>,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
    out: (usize, usize, usize),
) -> Array2<f64> {
    let (cin, n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kt, kh, kw) = kernel;
    let (ot, oh, ow) = out;
    let mut cols = Array2::<f64>::zeros((cin * kt * kh * kw, ot * oh * ow));
    for c in 0..cin {
        for dt in 0..kt {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kt + dt) * kh + i) * kw + j;
                    for otp in 0..ot {
                        let it = replicate(
                            (otp * stride.0 + dt) as isize - pad.0 as isize,
                            n,
                        );
                        for oy in 0..oh {
                            let iy = (oy * stride.1 + i) as isize - pad.1 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride.2 + j) as isize - pad.2 as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cols[[row, (otp * oh + oy) * ow + ox]] =
                                    x[[c, it, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2vol_3d(
    cols: &Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
    out: (usize, usize, usize),
) -> Array4<f64> {
    let (cin, n, h, w) = in_shape;
    let (kt, kh, kw) = kernel;
    let (ot, oh, ow) = out;
    let mut x = Array4::<f64>::zeros(in_shape);
    for c in 0..cin {
        for dt in 0..kt {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kt + dt) * kh + i) * kw + j;
                    for otp in 0..ot {
                        let it = replicate(
                            (otp * stride.0 + dt) as isize - pad.0 as isize,
                            n,
                        );
                        for oy in 0..oh {
                            let iy = (oy * stride.1 + i) as isize - pad.1 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride.2 + j) as isize - pad.2 as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                x[[c, it, iy as usize, ix as usize]] +=
                                    cols[[row, (otp * oh + oy) * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3D convolution: zero spatial padding, replicated temporal padding.
pub fn conv3d_forward(
    x: &Array4<f64>,
    w: &Array5<f64>,
    b: &Array1<f64>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Result<Array4<f64>> {
    let (cout, cin, kt, kh, kw) = (
        w.shape()[0],
        w.shape()[1],
        w.shape()[2],
        w.shape()[3],
        w.shape()[4],
    );
    if x.shape()[0] != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv3d expects {cin} input channels, got {}",
            x.shape()[0]
        )));
    }
    let ot = out_extent(x.shape()[1], kt, stride.0, pad.0)?;
    let oh = out_extent(x.shape()[2], kh, stride.1, pad.1)?;
    let ow = out_extent(x.shape()[3], kw, stride.2, pad.2)?;
    let cols = vol2col_3d(x, (kt, kh, kw), stride, pad, (ot, oh, ow));
    let w_mat = w
        .to_owned()
        .into_shape((cout, cin * kt * kh * kw))
        .expect("conv3d weight reshape");
    let mut y_mat = w_mat.dot(&cols);
    for (mut row, &bias) in y_mat.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row += bias;
    }
    Ok(y_mat
        .into_shape((cout, ot, oh, ow))
        .expect("conv3d output reshape"))
}

/// Gradients of 3D convolution w.r.t. input, weights, and bias.
pub fn conv3d_backward(
    x: &Array4<f64>,
    w: &Array5<f64>,
    grad_y: &Array4<f64>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> (Array4<f64>, Array5<f64>, Array1<f64>) {
    let (cout, cin, kt, kh, kw) = (
        w.shape()[0],
        w.shape()[1],
        w.shape()[2],
        w.shape()[3],
        w.shape()[4],
    );
    let (ot, oh, ow) = (grad_y.shape()[1], grad_y.shape()[2], grad_y.shape()[3]);
    let cols = vol2col_3d(x, (kt, kh, kw), stride, pad, (ot, oh, ow));
    let gy_mat = grad_y
        .to_owned()
        .into_shape((cout, ot * oh * ow))
        .expect("grad reshape");
    let grad_b = gy_mat.sum_axis(Axis(1));
    let grad_w = gy_mat
        .dot(&cols.t())
        .into_shape((cout, cin, kt, kh, kw))
        .expect("grad_w reshape");
    let w_mat = w
        .to_owned()
        .into_shape((cout, cin * kt * kh * kw))
        .expect("weight reshape");
    let grad_cols = w_mat.t().dot(&gy_mat);
    let grad_x = col2vol_3d(
        &grad_cols,
        (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]),
        (kt, kh, kw),
        stride,
        pad,
        (ot, oh, ow),
    );
    (grad_x, grad_w, grad_b)
}

/// 2D max pooling. Returns the pooled map and the flat input index of
/// each selected maximum (first maximum in scan order on ties).
pub fn maxpool2d_forward(
    x: &Array3<f64>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Array3<f64>, Vec<usize>)> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = out_extent(h, kernel.0, stride.0, 0)?;
    let ow = out_extent(w, kernel.1, stride.1, 0)?;
    let mut y = Array3::<f64>::zeros((c, oh, ow));
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for i in 0..kernel.0 {
                    for j in 0..kernel.1 {
                        let iy = oy * stride.0 + i;
                        let ix = ox * stride.1 + j;
                        let v = x[[ci, iy, ix]];
                        if v > best {
                            best = v;
                            best_idx = (ci * h + iy) * w + ix;
                        }
                    }
                }
                y[[ci, oy, ox]] = best;
                argmax[(ci * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool2d_backward(
    argmax: &[usize],
    grad_y: &Array3<f64>,
    in_shape: (usize, usize, usize),
) -> Array3<f64> {
    let mut grad_x = Array3::<f64>::zeros(in_shape);
    let flat = grad_x.as_slice_mut().expect("contiguous grad");
    for (g, &idx) in grad_y.iter().zip(argmax.iter()) {
        flat[idx] += *g;
    }
    grad_x
}

/// 3D max pooling (no padding). The caller resolves the temporal clamp
/// rule before invoking.
pub fn maxpool3d_forward(
    x: &Array4<f64>,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<(Array4<f64>, Vec<usize>)> {
    let (c, n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ot = out_extent(n, kernel.0, stride.0, 0)?;
    let oh = out_extent(h, kernel.1, stride.1, 0)?;
    let ow = out_extent(w, kernel.2, stride.2, 0)?;
    let mut y = Array4::<f64>::zeros((c, ot, oh, ow));
    let mut argmax = vec![0usize; c * ot * oh * ow];
    for ci in 0..c {
        for otp in 0..ot {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dt in 0..kernel.0 {
                        for i in 0..kernel.1 {
                            for j in 0..kernel.2 {
                                let it = otp * stride.0 + dt;
                                let iy = oy * stride.1 + i;
                                let ix = ox * stride.2 + j;
                                let v = x[[ci, it, iy, ix]];
                                if v > best {
                                    best = v;
                                    best_idx = ((ci * n + it) * h + iy) * w + ix;
                                }
                            }
                        }
                    }
                    y[[ci, otp, oy, ox]] = best;
                    argmax[((ci * ot + otp) * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool3d_backward(
    argmax: &[usize],
    grad_y: &Array4<f64>,
    in_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut grad_x = Array4::<f64>::zeros(in_shape);
    let flat = grad_x.as_slice_mut().expect("contiguous grad");
    for (g, &idx) in grad_y.iter().zip(argmax.iter()) {
        flat[idx] += *g;
    }
    grad_x
}

/// In-place rectifier.
pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks the gradient where the (post-activation) output is zero.
pub fn relu_backward_inplace<D: ndarray::Dimension>(
    grad: &mut ndarray::Array<f64, D>,
    output: &ndarray::Array<f64, D>,
) {
    grad.zip_mut_with(output, |g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Mean over the temporal axis: `(C, N, H, W) -> (C, H, W)`.
pub fn temporal_mean_forward(x: &Array4<f64>) -> Array3<f64> {
    let n = x.shape()[1] as f64;
    x.sum_axis(Axis(1)) / n
}

/// Adjoint of the temporal mean: spreads the gradient evenly along time.
pub fn temporal_mean_backward(grad_y: &Array3<f64>, n: usize) -> Array4<f64> {
    let (c, h, w) = (grad_y.shape()[0], grad_y.shape()[1], grad_y.shape()[2]);
    let scaled = grad_y / n as f64;
    let mut out = Array4::<f64>::zeros((c, n, h, w));
    for t in 0..n {
        out.index_axis_mut(Axis(1), t).assign(&scaled);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_conv2d() {
        let mut w = Array4::<f64>::zeros((1, 1, 1, 1));
        w[[0, 0, 0, 0]] = 1.0;
        let x = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f64);
        let y = conv2d_forward(&x, &w, &arr1(&[0.0]), (1, 1), (0, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_prebias() {
        let w = Array4::<f64>::zeros((2, 3, 3, 3));
        let x = Array3::from_elem((3, 5, 5), 0.7);
        let y = conv2d_forward(&x, &w, &arr1(&[0.0, 0.0]), (1, 1), (1, 1)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand3(&mut rng, 2, 5, 4);
        let mut w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-0.5..0.5));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        let stride = (1, 1);
        let pad = (1, 1);
        // Scalar loss: sum of outputs.
        let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
        let grad_y = Array3::from_elem(y.raw_dim(), 1.0);
        let (gx, gw, gb) = conv2d_backward(&x, &w, &grad_y, stride, pad);

        let eps = 1e-6;
        let idx = [1, 0, 2, 1];
        let orig = w[idx];
        w[idx] = orig + eps;
        let lp = conv2d_forward(&x, &w, &b, stride, pad).unwrap().sum();
        w[idx] = orig - eps;
        let lm = conv2d_forward(&x, &w, &b, stride, pad).unwrap().sum();
        w[idx] = orig;
        let num = (lp - lm) / (2.0 * eps);
        assert!((num - gw[idx]).abs() < 1e-6, "dw {} vs {}", num, gw[idx]);

        let mut x2 = x.clone();
        let xi = [1, 2, 3];
        let orig = x2[xi];
        x2[xi] = orig + eps;
        let lp = conv2d_forward(&x2, &w, &b, stride, pad).unwrap().sum();
        x2[xi] = orig - eps;
        let lm = conv2d_forward(&x2, &w, &b, stride, pad).unwrap().sum();
        let num = (lp - lm) / (2.0 * eps);
        assert!((num - gx[xi]).abs() < 1e-6);
        assert!((gb[0] - y.index_axis(Axis(0), 0).len() as f64).abs() < 1e-9);
    }

    #[test]
    fn conv3d_constant_time_input_stays_constant() {
        // Replicated temporal padding: constant-in-time input must keep
        // every output time step identical.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = rand3(&mut rng, 2, 5, 5);
        let n = 4;
        let mut x = Array4::<f64>::zeros((2, n, 5, 5));
        for t in 0..n {
            x.index_axis_mut(Axis(1), t).assign(&frame);
        }
        let w = Array5::from_shape_fn((3, 2, 3, 3, 3), |_| rng.gen_range(-0.5..0.5));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        let y = conv3d_forward(&x, &w, &b, (1, 1, 1), (1, 1, 1)).unwrap();
        let first = y.index_axis(Axis(1), 0).to_owned();
        for t in 1..y.shape()[1] {
            let slice = y.index_axis(Axis(1), t);
            for (a, b) in slice.iter().zip(first.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let mut w = Array5::from_shape_fn((2, 2, 3, 3, 3), |_| rng.gen_range(-0.5..0.5));
        let b = Array1::from_shape_fn(2, |_| rng.gen_range(-0.5..0.5));
        let stride = (1, 1, 1);
        let pad = (1, 1, 1);
        let y = conv3d_forward(&x, &w, &b, stride, pad).unwrap();
        let grad_y = Array4::from_shape_fn(y.raw_dim(), |_| rng.gen_range(-1.0..1.0));
        let (gx, gw, _gb) = conv3d_backward(&x, &w, &grad_y, stride, pad);

        let loss = |w: &Array5<f64>, x: &Array4<f64>| -> f64 {
            let y = conv3d_forward(x, w, &b, stride, pad).unwrap();
            (&y * &grad_y).sum()
        };
        let eps = 1e-6;
        for idx in [[0, 1, 0, 2, 1], [1, 0, 2, 0, 0]] {
            let orig = w[idx];
            w[idx] = orig + eps;
            let lp = loss(&w, &x);
            w[idx] = orig - eps;
            let lm = loss(&w, &x);
            w[idx] = orig;
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - gw[idx]).abs() < 1e-5, "dw {} vs {}", num, gw[idx]);
        }
        let mut x2 = x.clone();
        // Edge frame: exercises the replicate-padding adjoint.
        for xi in [[0, 0, 1, 1], [1, 2, 3, 3]] {
            let orig = x2[xi];
            x2[xi] = orig + eps;
            let lp = loss(&w, &x2);
            x2[xi] = orig - eps;
            let lm = loss(&w, &x2);
            x2[xi] = orig;
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - gx[xi]).abs() < 1e-5, "dx {} vs {}", num, gx[xi]);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Array3::from_shape_vec(
            (1, 2, 4),
            vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 1.0, 6.0],
        )
        .unwrap();
        let (y, argmax) = maxpool2d_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1]], 6.0);
        let grad_y = Array3::from_elem((1, 1, 2), 1.0);
        let gx = maxpool2d_backward(&argmax, &grad_y, (1, 2, 4));
        assert_eq!(gx[[0, 0, 1]], 1.0);
        assert_eq!(gx[[0, 1, 3]], 1.0);
        assert_eq!(gx.sum(), 2.0);
    }

    #[test]
    fn temporal_mean_values_and_adjoint() {
        let mut x = Array4::<f64>::zeros((1, 4, 1, 1));
        for (t, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            x[[0, t, 0, 0]] = *v;
        }
        let y = temporal_mean_forward(&x);
        assert!((y[[0, 0, 0]] - 2.5).abs() < 1e-15);

        let g = temporal_mean_backward(&Array3::from_elem((1, 1, 1), 1.0), 4);
        assert!(g.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
