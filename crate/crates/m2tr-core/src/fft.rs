//! Per-channel 2D FFT over rank-3 feature maps.
//!
//! Radix-2 Cooley-Tukey on power-of-two lengths, direct DFT otherwise.
//! Forward is unnormalized; the inverse carries the `1/(H*W)` factor and
//! returns the real part.

use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static FFT_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of 2D transforms executed since process start. Lets tests observe
/// that ablated paths really skip the frequency stream.
pub fn transform_count() -> u64 {
    FFT_CALLS.load(Ordering::Relaxed)
}

/// Frequency-domain image of a rank-3 feature map: real and imaginary parts,
/// each shaped like the input.
#[derive(Debug, Clone)]
pub struct ComplexSpectrum<T: Scalar> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexSpectrum<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::Shape(format!(
                "spectrum parts disagree: {:?} vs {:?}",
                re.shape(),
                im.shape()
            )));
        }
        if re.rank() != 3 {
            return Err(Error::Shape(format!(
                "spectrum must be rank 3, got {:?}",
                re.shape()
            )));
        }
        Ok(ComplexSpectrum { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// Sum of squared magnitudes, for Parseval-style checks.
    pub fn energy(&self) -> f64 {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| {
                let (r, i) = (r.as_f64(), i.as_f64());
                r * r + i * i
            })
            .sum()
    }
}

fn fft1d<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        // Iterative radix-2 Cooley-Tukey with bit-reversal reordering.
        let levels = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - levels);
            if j > i {
                buf.swap(i, j);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut len = 2;
        while len <= n {
            let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
            let wlen = Complex::new(T::from_f64(ang.cos()), T::from_f64(ang.sin()));
            for start in (0..n).step_by(len) {
                let mut w = Complex::new(T::one(), T::zero());
                for k in 0..len / 2 {
                    let a = buf[start + k];
                    let b = buf[start + k + len / 2] * w;
                    buf[start + k] = a + b;
                    buf[start + k + len / 2] = a - b;
                    w = w * wlen;
                }
            }
            len <<= 1;
        }
    } else {
        let sign = if inverse { 2.0 } else { -2.0 };
        let input: Vec<Complex<T>> = buf.to_vec();
        for (k, slot) in buf.iter_mut().enumerate() {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (j, v) in input.iter().enumerate() {
                let ang = sign * std::f64::consts::PI * (k * j) as f64 / n as f64;
                acc = acc + *v * Complex::new(T::from_f64(ang.cos()), T::from_f64(ang.sin()));
            }
            *slot = acc;
        }
    }
}

/// 2D transform of one channel plane, rows then columns. Unnormalized in both
/// directions; callers apply `1/(h*w)` on the inverse.
fn fft2_plane<T: Scalar>(plane: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(plane.len(), h * w);
    for row in plane.chunks_mut(w) {
        fft1d(row, inverse);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        fft1d(&mut col, inverse);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

fn check_rank3<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!(
            "expected rank-3 feature map, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Per-channel 2D discrete Fourier transform of a `(H, W, C)` map.
pub fn fft2d<T: Scalar>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (h, w, c) = check_rank3(x)?;
    FFT_CALLS.fetch_add(1, Ordering::Relaxed);
    let mut re = Tensor::zeros(x.shape());
    let mut im = Tensor::zeros(x.shape());
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
    for ch in 0..c {
        for i in 0..h * w {
            plane[i] = Complex::new(x.data()[i * c + ch], T::zero());
        }
        fft2_plane(&mut plane, h, w, false);
        for i in 0..h * w {
            re.data_mut()[i * c + ch] = plane[i].re;
            im.data_mut()[i * c + ch] = plane[i].im;
        }
    }
    ComplexSpectrum::new(re, im)
}

/// Inverse per-channel 2D transform, returning the real part.
///
/// The imaginary residue is discarded: a real-valued learnable filter does not
/// generally preserve Hermitian symmetry, so the spatial result of a filtered
/// spectrum is complex and only its real part flows on.
pub fn ifft2d<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    Ok(ifft2d_parts(s)?.0)
}

/// Inverse transform keeping both real part and the imaginary residue, so
/// callers can assert how much was discarded.
pub fn ifft2d_parts<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = check_rank3(&s.re)?;
    FFT_CALLS.fetch_add(1, Ordering::Relaxed);
    let norm = T::from_f64(1.0 / (h * w) as f64);
    let mut out_re = Tensor::zeros(s.re.shape());
    let mut out_im = Tensor::zeros(s.re.shape());
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
    for ch in 0..c {
        for i in 0..h * w {
            plane[i] = Complex::new(s.re.data()[i * c + ch], s.im.data()[i * c + ch]);
        }
        fft2_plane(&mut plane, h, w, true);
        for i in 0..h * w {
            out_re.data_mut()[i * c + ch] = plane[i].re * norm;
            out_im.data_mut()[i * c + ch] = plane[i].im * norm;
        }
    }
    Ok((out_re, out_im))
}
