//! Dense neural kernels on plain tensors: matrix products, convolution,
//! softmax, pooling, bilinear upsampling, and their adjoints.
//!
//! Every kernel accumulates each output element in a fixed sequential order,
//! so results are bitwise deterministic on a given platform.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `a (n, k) @ b (k, m)`; `trans_b` treats `b` as stored `(m, k)` and
/// multiplies by its transpose.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape(format!(
            "matmul wants rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let (bk, m) = if trans_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if k != bk {
        return Err(Error::Shape(format!(
            "matmul inner dims disagree: {:?} vs {:?} (trans_b={trans_b})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    if trans_b {
        for i in 0..n {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &bd[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for kk in 0..k {
                    acc += arow[kk] * brow[kk];
                }
                od[i * m + j] = acc;
            }
        }
    } else {
        for i in 0..n {
            let orow = &mut od[i * m..(i + 1) * m];
            let arow = &ad[i * k..(i + 1) * k];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &bd[kk * m..(kk + 1) * m];
                for j in 0..m {
                    orow[j] += aik * brow[j];
                }
            }
        }
    }
    Ok(out)
}

/// `a^T (k, n) stored as (n, k)`... transpose-first product: treats `a` as
/// stored `(k, n)` and computes `a^T @ b` with `b (k, m)`, yielding `(n, m)`.
pub fn matmul_ta<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "transposed matmul dims disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (k, n) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for kk in 0..k {
        let arow = &ad[kk * n..(kk + 1) * n];
        let brow = &bd[kk * m..(kk + 1) * m];
        for i in 0..n {
            let aik = arow[i];
            let orow = &mut od[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Standard affine map on rank-2 input: `x (n, i) @ w (i, o) + b (o)`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = matmul(x, w, false)?;
    add_bias_rows(&mut out, b)?;
    Ok(out)
}

pub fn add_bias_rows<T: Scalar>(x: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "bias {:?} does not broadcast over rows of {:?}",
            b.shape(),
            x.shape()
        )));
    }
    let m = b.shape()[0];
    for row in x.data_mut().chunks_mut(m) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(())
}

/// Row-wise softmax of a rank-2 tensor, stabilized by row-max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!(
            "softmax wants a rank-2 tensor, got {:?}",
            x.shape()
        )));
    }
    let m = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m) {
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    Ok(out)
}

/// Adjoint of row-wise softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_adjoint<T: Scalar>(y: &Tensor<T>, dy: &[T]) -> Vec<T> {
    let m = y.shape()[1];
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..y.shape()[0] {
        let yr = &y.data()[r * m..(r + 1) * m];
        let gr = &dy[r * m..(r + 1) * m];
        let mut inner = T::zero();
        for j in 0..m {
            inner += yr[j] * gr[j];
        }
        for j in 0..m {
            dx[r * m + j] = yr[j] * (gr[j] - inner);
        }
    }
    dx
}

pub fn conv2d_output_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Shape("stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {pad})"
        )));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// 2D cross-correlation: `x (h, w, ci)` with `w (kh, kw, ci, co)` and bias
/// `(co)`, zero-padded by `pad`, output `(oh, ow, co)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
        return Err(Error::Shape(format!(
            "conv2d wants x rank 3, w rank 4, b rank 1; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (h, iw, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, wci, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wci != ci {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {ci}, kernel expects {wci}"
        )));
    }
    if b.shape()[0] != co {
        return Err(Error::Shape(format!(
            "conv2d bias length {} does not match {co} output channels",
            b.shape()[0]
        )));
    }
    let (oh, ow) = conv2d_output_dims(h, iw, kh, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[oh, ow, co]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let opix = &mut od[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            opix.copy_from_slice(b.data());
            for ky in 0..kh {
                let iy = oy * stride + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..kw {
                    let ix = ox * stride + kx;
                    if ix < pad || ix - pad >= iw {
                        continue;
                    }
                    let ix = ix - pad;
                    let xpix = &xd[(iy * iw + ix) * ci..(iy * iw + ix + 1) * ci];
                    let wbase = ((ky * kw + kx) * ci) * co;
                    for ic in 0..ci {
                        let xv = xpix[ic];
                        let wrow = &wd[wbase + ic * co..wbase + (ic + 1) * co];
                        for oc in 0..co {
                            opix[oc] += xv * wrow[oc];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of conv2d with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(
    dy: &[T],
    w: &Tensor<T>,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (h, iw, ci) = (x_shape[0], x_shape[1], x_shape[2]);
    let (kh, kw, _, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = conv2d_output_dims(h, iw, kh, kw, stride, pad).expect("checked in forward");
    let wd = w.data();
    let mut dx = vec![T::zero(); h * iw * ci];
    for iy in 0..h {
        for ix in 0..iw {
            let dpix = &mut dx[(iy * iw + ix) * ci..(iy * iw + ix + 1) * ci];
            for ky in 0..kh {
                let oy_num = iy + pad;
                if oy_num < ky || (oy_num - ky) % stride != 0 {
                    continue;
                }
                let oy = (oy_num - ky) / stride;
                if oy >= oh {
                    continue;
                }
                for kx in 0..kw {
                    let ox_num = ix + pad;
                    if ox_num < kx || (ox_num - kx) % stride != 0 {
                        continue;
                    }
                    let ox = (ox_num - kx) / stride;
                    if ox >= ow {
                        continue;
                    }
                    let gpix = &dy[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                    let wbase = ((ky * kw + kx) * ci) * co;
                    for ic in 0..ci {
                        let wrow = &wd[wbase + ic * co..wbase + (ic + 1) * co];
                        let mut acc = T::zero();
                        for oc in 0..co {
                            acc += gpix[oc] * wrow[oc];
                        }
                        dpix[ic] += acc;
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of conv2d with respect to its kernel.
pub fn conv2d_grad_weights<T: Scalar>(
    dy: &[T],
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (h, iw, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, co) = (w_shape[0], w_shape[1], w_shape[3]);
    let (oh, ow) = conv2d_output_dims(h, iw, kh, kw, stride, pad).expect("checked in forward");
    let xd = x.data();
    let mut dw = vec![T::zero(); kh * kw * ci * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let gpix = &dy[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            for ky in 0..kh {
                let iy = oy * stride + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..kw {
                    let ix = ox * stride + kx;
                    if ix < pad || ix - pad >= iw {
                        continue;
                    }
                    let ix = ix - pad;
                    let xpix = &xd[(iy * iw + ix) * ci..(iy * iw + ix + 1) * ci];
                    let wbase = ((ky * kw + kx) * ci) * co;
                    for ic in 0..ci {
                        let xv = xpix[ic];
                        let drow = &mut dw[wbase + ic * co..wbase + (ic + 1) * co];
                        for oc in 0..co {
                            drow[oc] += xv * gpix[oc];
                        }
                    }
                }
            }
        }
    }
    dw
}

pub fn conv2d_grad_bias<T: Scalar>(dy: &[T], co: usize) -> Vec<T> {
    let mut db = vec![T::zero(); co];
    for pix in dy.chunks(co) {
        for (d, &g) in db.iter_mut().zip(pix) {
            *d += g;
        }
    }
    db
}

/// Source coordinate and blend weights of one upsampled output coordinate
/// under half-pixel-center bilinear interpolation with edge clamping.
fn bilinear_source(dst: usize, factor: usize, in_dim: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.clamp(0.0, (in_dim - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_dim - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear upsampling of a `(h, w, c)` map by an integer factor.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!(
            "upsample wants a rank-3 map, got {:?}",
            x.shape()
        )));
    }
    if factor == 0 {
        return Err(Error::Shape("upsample factor must be >= 1".into()));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let xd = x.data();
    let od = out.data_mut();
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_source(oy, factor, h);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_source(ox, factor, w);
            let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = T::from_f64((1.0 - fy) * fx);
            let w10 = T::from_f64(fy * (1.0 - fx));
            let w11 = T::from_f64(fy * fx);
            for ch in 0..c {
                od[(oy * ow + ox) * c + ch] = xd[(y0 * w + x0) * c + ch] * w00
                    + xd[(y0 * w + x1) * c + ch] * w01
                    + xd[(y1 * w + x0) * c + ch] * w10
                    + xd[(y1 * w + x1) * c + ch] * w11;
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_adjoint<T: Scalar>(dy: &[T], x_shape: &[usize], factor: usize) -> Vec<T> {
    let (h, w, c) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); h * w * c];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_source(oy, factor, h);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_source(ox, factor, w);
            let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = T::from_f64((1.0 - fy) * fx);
            let w10 = T::from_f64(fy * (1.0 - fx));
            let w11 = T::from_f64(fy * fx);
            for ch in 0..c {
                let g = dy[(oy * ow + ox) * c + ch];
                dx[(y0 * w + x0) * c + ch] += g * w00;
                dx[(y0 * w + x1) * c + ch] += g * w01;
                dx[(y1 * w + x0) * c + ch] += g * w10;
                dx[(y1 * w + x1) * c + ch] += g * w11;
            }
        }
    }
    dx
}

/// Mean over the spatial grid of a `(h, w, c)` map, yielding `(c)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!(
            "global average pool wants a rank-3 map, got {:?}",
            x.shape()
        )));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(&[c]);
    for pix in x.data().chunks(c) {
        for (o, &v) in out.data_mut().iter_mut().zip(pix) {
            *o += v;
        }
    }
    for o in out.data_mut() {
        *o *= inv;
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(T::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn dense_identity_weights_pass_input() {
        let x = random(&[3, 4], 1);
        let w = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[4]);
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dense_zero_weights_broadcast_bias() {
        let x = random(&[2, 3], 2);
        let w = Tensor::zeros(&[3, 5]);
        let b = Tensor::from_vec(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        for row in y.data().chunks(5) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn dense_matches_loop_oracle() {
        let x = random(&[4, 6], 3);
        let w = random(&[6, 5], 4);
        let b = random(&[5], 5);
        let y = dense(&x, &w, &b).unwrap();
        let o = m2tr_oracles::loop_dense(x.data(), 4, 6, w.data(), 5, b.data());
        for (a, e) in y.data().iter().zip(&o) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_transposed_variants_agree_with_plain() {
        let a = random(&[3, 4], 6);
        let b = random(&[5, 4], 7);
        let nt = matmul(&a, &b, true).unwrap();
        // materialized transpose for comparison
        let bt = Tensor::from_fn(&[4, 5], |i| b.data()[(i % 5) * 4 + i / 5]);
        let plain = matmul(&a, &bt, false).unwrap();
        for (x, y) in nt.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = random(&[4, 3], 8);
        let d = random(&[4, 6], 9);
        let ta = matmul_ta(&c, &d).unwrap();
        let ct = Tensor::from_fn(&[3, 4], |i| c.data()[(i % 4) * 3 + i / 4]);
        let plain2 = matmul(&ct, &d, false).unwrap();
        for (x, y) in ta.data().iter().zip(plain2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_analytic_rows() {
        let x = Tensor::<f64>::from_vec(&[3, 3], vec![0.0, 0.0, 0.0, 7.5, 7.5, 7.5, 1000.0, 1000.0, 1000.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        for v in y.data() {
            assert!(v.is_finite());
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let two = Tensor::<f64>::from_vec(&[1, 2], vec![0.0, (3.0f64).ln()]).unwrap();
        let y2 = softmax_rows(&two).unwrap();
        assert!((y2.data()[0] - 0.25).abs() < 1e-12);
        assert!((y2.data()[1] - 0.75).abs() < 1e-12);
        let big = Tensor::<f64>::from_vec(&[1, 2], vec![1000.0, 1000.0]).unwrap();
        let yb = softmax_rows(&big).unwrap();
        assert!((yb.data()[0] - 0.5).abs() < 1e-12 && yb.data()[1].is_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = random(&[5, 7], 10);
        let y = softmax_rows(&x).unwrap();
        for row in y.data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + 3.25);
        let ys = softmax_rows(&shifted).unwrap();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_identity_1x1() {
        let x = random(&[5, 4, 2], 11);
        let mut w = Tensor::zeros(&[1, 1, 2, 2]);
        w.data_mut()[0] = 1.0; // (0,0,ic0,oc0)
        w.data_mut()[3] = 1.0; // (0,0,ic1,oc1)
        let b = Tensor::zeros(&[2]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_all_ones_interior_sum() {
        let c = 0.5;
        let cin = 3;
        let x = Tensor::<f64>::filled(&[6, 6, cin], c);
        let w = Tensor::filled(&[3, 3, cin, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        // interior pixel: 9 taps * cin channels * c
        assert!((y.at3(3, 3, 0) - 9.0 * cin as f64 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let x = random(&[7, 5, 3], 12);
        let w = random(&[3, 3, 3, 4], 13);
        let b = random(&[4], 14);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let y = conv2d(&x, &w, &b, stride, pad).unwrap();
            let (o, oh, ow) =
                m2tr_oracles::loop_conv2d(x.data(), 7, 5, 3, w.data(), 3, 3, 4, b.data(), stride, pad);
            assert_eq!(y.shape(), &[oh, ow, 4]);
            for (a, e) in y.data().iter().zip(&o) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random(&[4, 4, 2], 15);
        let w = random(&[3, 3, 3, 4], 16);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(conv2d(&x, &w, &b, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f64>::filled(&[3, 3, 2], 0.42);
        let y = upsample_bilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), &[6, 6, 2]);
        for &v in y.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let x = random(&[4, 5, 3], 17);
        let y = upsample_bilinear(&x, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn upsample_2x2_matches_hand_computed_weights() {
        // 2x2 input [[a,b],[c,d]], factor 2, half-pixel centers with edge
        // clamping. Source coords for outputs 0..4 are -0.25, 0.25, 0.75,
        // 1.25 -> clamped 0, 0.25, 0.75, 1 with lerp fractions 0, .25, .75, 1.
        let (a, b, c, d) = (1.0, 2.0, 5.0, 9.0);
        let x = Tensor::from_vec(&[2, 2, 1], vec![a, b, c, d]).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        let lerp = |p: f64, q: f64, f: f64| p * (1.0 - f) + q * f;
        let fr = [0.0, 0.25, 0.75, 1.0];
        for (oy, &fy) in fr.iter().enumerate() {
            for (ox, &fx) in fr.iter().enumerate() {
                let top = lerp(a, b, fx);
                let bot = lerp(c, d, fx);
                let expect = lerp(top, bot, fy);
                assert!(
                    (y.at3(oy, ox, 0) - expect).abs() < 1e-12,
                    "mismatch at ({oy},{ox})"
                );
            }
        }
    }

    #[test]
    fn global_avg_pool_means_channels() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
        assert!((y.data()[1] - 25.0).abs() < 1e-12);
    }
}
