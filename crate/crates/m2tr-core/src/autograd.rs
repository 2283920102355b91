//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Forward values are computed eagerly as operations are recorded; the tape
//! then replays adjoints in reverse, accumulating parameter gradients into
//! their [`ParamStore`](crate::params::ParamStore) slots. A tape belongs to
//! one thread and one store; independent tapes may run concurrently against
//! shared read-only parameters.

use crate::error::{Error, Result};
use crate::fft;
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Input,
    Param { id: ParamId },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    Ln { x: Var },
    Sqrt { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Matmul { a: Var, b: Var, trans_b: bool },
    AddBiasRows { x: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    UpsampleBilinear { x: Var, factor: usize },
    GlobalAvgPool { x: Var },
    SoftmaxRows { x: Var },
    Reshape { x: Var },
    Reindex { x: Var, perm: Vec<usize> },
    ConcatLast { xs: Vec<Var> },
    ConcatFlat { xs: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    Dot { a: Var, b: Var },
    Fft2 { x: Var },
    Ifft2Re { s: Var },
    ComplexScale { g: Var, s: Var },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Ordered record of primitive operations, sufficient to replay adjoints.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_memo: Vec<Option<Var>>,
}

/// Outcome of one backward pass.
#[derive(Debug, Clone, Copy)]
pub struct BackwardReport {
    /// Primitives visited during replay; always the full tape, each exactly
    /// once, in reverse order.
    pub visited: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_memo: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Records a parameter leaf. Memoized: binding the same parameter again
    /// on this tape returns the existing node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_memo.len() < store.len() {
            self.param_memo.resize(store.len(), None);
        }
        if let Some(v) = self.param_memo[id.index()] {
            return v;
        }
        let v = self.push(Op::Param { id }, store.get(id).clone());
        self.param_memo[id.index()] = Some(v);
        v
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::Shape(format!(
                "{name} wants equal shapes, got {sa:?} and {sb:?}"
            )));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape(a, b, "add")?;
        let v = Tensor::from_fn(&shape, |i| {
            self.nodes[a.0].value.data()[i] + self.nodes[b.0].value.data()[i]
        });
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape(a, b, "sub")?;
        let v = Tensor::from_fn(&shape, |i| {
            self.nodes[a.0].value.data()[i] - self.nodes[b.0].value.data()[i]
        });
        Ok(self.push(Op::Sub { a, b }, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape(a, b, "mul")?;
        let v = Tensor::from_fn(&shape, |i| {
            self.nodes[a.0].value.data()[i] * self.nodes[b.0].value.data()[i]
        });
        Ok(self.push(Op::Mul { a, b }, v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape(a, b, "div")?;
        let v = Tensor::from_fn(&shape, |i| {
            self.nodes[a.0].value.data()[i] / self.nodes[b.0].value.data()[i]
        });
        Ok(self.push(Op::Div { a, b }, v))
    }

    /// Elementwise `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: T, offset: T) -> Var {
        let v = Tensor::from_fn(self.nodes[x.0].value.shape(), |i| {
            scale * self.nodes[x.0].value.data()[i] + offset
        });
        self.push(Op::Affine { x, scale }, v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = kernels::relu(&self.nodes[x.0].value);
        self.push(Op::Relu { x }, v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = Tensor::from_fn(self.nodes[x.0].value.shape(), |i| {
            let x = self.nodes[x.0].value.data()[i];
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push(Op::Sigmoid { x }, v)
    }

    /// Elementwise natural log; callers clamp inputs away from zero first.
    pub fn ln(&mut self, x: Var) -> Var {
        let v = Tensor::from_fn(self.nodes[x.0].value.shape(), |i| {
            self.nodes[x.0].value.data()[i].ln()
        });
        self.push(Op::Ln { x }, v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = Tensor::from_fn(self.nodes[x.0].value.shape(), |i| {
            self.nodes[x.0].value.data()[i].sqrt()
        });
        self.push(Op::Sqrt { x }, v)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = Tensor::from_fn(self.nodes[x.0].value.shape(), |i| {
            self.nodes[x.0].value.data()[i].max(lo).min(hi)
        });
        self.push(Op::Clamp { x, lo, hi }, v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, false)?;
        Ok(self.push(Op::Matmul { a, b, trans_b: false }, v))
    }

    /// `a @ b^T` with `b` stored row-major `(m, k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, true)?;
        Ok(self.push(Op::Matmul { a, b, trans_b: true }, v))
    }

    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let mut v = self.nodes[x.0].value.clone();
        kernels::add_bias_rows(&mut v, &self.nodes[b.0].value)?;
        Ok(self.push(Op::AddBiasRows { x, b }, v))
    }

    /// Affine map `x (n, i) @ w (i, o) + b (o)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias_rows(y, b)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        )?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, v))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = kernels::upsample_bilinear(&self.nodes[x.0].value, factor)?;
        Ok(self.push(Op::UpsampleBilinear { x, factor }, v))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = kernels::global_avg_pool(&self.nodes[x.0].value)?;
        Ok(self.push(Op::GlobalAvgPool { x }, v))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_rows(&self.nodes[x.0].value)?;
        Ok(self.push(Op::SoftmaxRows { x }, v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[x.0].value.clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, v))
    }

    /// Pure gather: `out[i] = x[perm[i]]`. The adjoint scatter-adds, so a
    /// bijective `perm` (patch reordering) is exactly inverted.
    pub fn reindex(&mut self, x: Var, perm: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if n != perm.len() {
            return Err(Error::Shape(format!(
                "reindex shape {out_shape:?} wants {n} entries, permutation has {}",
                perm.len()
            )));
        }
        let src = &self.nodes[x.0].value;
        if let Some(&bad) = perm.iter().find(|&&i| i >= src.numel()) {
            return Err(Error::Shape(format!(
                "reindex entry {bad} out of bounds for {} values",
                src.numel()
            )));
        }
        let v = Tensor::from_fn(out_shape, |i| src.data()[perm[i]]);
        Ok(self.push(Op::Reindex { x, perm }, v))
    }

    /// Concatenates along the last axis; all other dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if first.is_empty() {
            return Err(Error::Shape("cannot concat scalars".into()));
        }
        let lead = &first[..first.len() - 1];
        let mut last_total = 0;
        for &v in xs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat operands disagree: {first:?} vs {s:?}"
                )));
            }
            last_total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.push(last_total);
        let mut data = Vec::with_capacity(rows * last_total);
        for r in 0..rows {
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let w = t.shape()[t.rank() - 1];
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::ConcatLast { xs: xs.to_vec() }, v))
    }

    /// Concatenates the flattened data of several values into one rank-1
    /// tensor, in argument order.
    pub fn concat_flat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &v in xs {
            data.extend_from_slice(self.nodes[v.0].value.data());
        }
        let total = data.len();
        let v = Tensor::from_vec(&[total], data)?;
        Ok(self.push(Op::ConcatFlat { xs: xs.to_vec() }, v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push(Op::Sum { x }, Tensor::scalar(acc))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push(Op::Mean { x }, Tensor::scalar(acc / T::from_usize(n)))
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "dot")?;
        let mut acc = T::zero();
        for (x, y) in self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
        {
            acc += *x * *y;
        }
        Ok(self.push(Op::Dot { a, b }, Tensor::scalar(acc)))
    }

    /// Per-channel 2D FFT of a `(h, w, c)` map, recorded as a stacked
    /// `(2, h, w, c)` tensor holding the real then imaginary part.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let spec = fft::fft2d(&self.nodes[x.0].value)?;
        let v = stack_spectrum(&spec)?;
        Ok(self.push(Op::Fft2 { x }, v))
    }

    /// Real part of the inverse 2D FFT of a stacked spectrum.
    pub fn ifft2_re(&mut self, s: Var) -> Result<Var> {
        let spec = unstack_spectrum(&self.nodes[s.0].value)?;
        let v = fft::ifft2d(&spec)?;
        Ok(self.push(Op::Ifft2Re { s }, v))
    }

    /// Hadamard product of a real filter `(h, w, c)` with both parts of a
    /// stacked spectrum `(2, h, w, c)`.
    pub fn complex_scale(&mut self, g: Var, s: Var) -> Result<Var> {
        let gs = self.nodes[g.0].value.shape().to_vec();
        let ss = self.nodes[s.0].value.shape().to_vec();
        if ss.len() != 4 || ss[0] != 2 || gs != ss[1..] {
            return Err(Error::Shape(format!(
                "filter {gs:?} does not match stacked spectrum {ss:?}"
            )));
        }
        let half = self.nodes[g.0].value.numel();
        let v = Tensor::from_fn(&ss, |i| {
            self.nodes[g.0].value.data()[i % half] * self.nodes[s.0].value.data()[i]
        });
        Ok(self.push(Op::ComplexScale { g, s }, v))
    }

    /// Propagates `d loss / d node` from a scalar loss back to every
    /// parameter leaf, accumulating into the store's gradient slots.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<BackwardReport> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut adjoints: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        adjoints[loss.0] = Some(vec![T::one()]);
        let mut visited = 0usize;
        for i in (0..n).rev() {
            visited += 1;
            let g = match adjoints[i].take() {
                Some(g) => g,
                None => continue,
            };
            let (before, rest) = self.nodes.split_at(i);
            let node = &rest[0];
            let value_of = |v: Var| &before[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param { id } => store.add_grad(*id, &g)?,
                Op::Add { a, b } => {
                    acc_into(&mut adjoints, *a, value_of(*a).numel(), |dst| {
                        add_assign(dst, &g)
                    });
                    acc_into(&mut adjoints, *b, value_of(*b).numel(), |dst| {
                        add_assign(dst, &g)
                    });
                }
                Op::Sub { a, b } => {
                    acc_into(&mut adjoints, *a, value_of(*a).numel(), |dst| {
                        add_assign(dst, &g)
                    });
                    acc_into(&mut adjoints, *b, value_of(*b).numel(), |dst| {
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let av = value_of(*a).data();
                    let bv = value_of(*b).data();
                    acc_into(&mut adjoints, *a, av.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += g[j] * bv[j];
                        }
                    });
                    acc_into(&mut adjoints, *b, bv.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += g[j] * av[j];
                        }
                    });
                }
                Op::Div { a, b } => {
                    let av = value_of(*a).data();
                    let bv = value_of(*b).data();
                    acc_into(&mut adjoints, *a, av.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += g[j] / bv[j];
                        }
                    });
                    acc_into(&mut adjoints, *b, bv.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                        }
                    });
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    acc_into(&mut adjoints, *x, value_of(*x).numel(), |dst| {
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d += s * gv;
                        }
                    });
                }
                Op::Relu { x } => {
                    let xv = value_of(*x).data();
                    acc_into(&mut adjoints, *x, xv.len(), |dst| {
                        for j in 0..dst.len() {
                            if xv[j] > T::zero() {
                                dst[j] += g[j];
                            }
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let yv = node.value.data();
                    acc_into(&mut adjoints, *x, yv.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += g[j] * yv[j] * (T::one() - yv[j]);
                        }
                    });
                }
                Op::Ln { x } => {
                    let xv = value_of(*x).data();
                    acc_into(&mut adjoints, *x, xv.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += g[j] / xv[j];
                        }
                    });
                }
                Op::Sqrt { x } => {
                    let yv = node.value.data();
                    let half = T::from_f64(0.5);
                    acc_into(&mut adjoints, *x, yv.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += g[j] * half / yv[j];
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = value_of(*x).data();
                    let (lo, hi) = (*lo, *hi);
                    acc_into(&mut adjoints, *x, xv.len(), |dst| {
                        for j in 0..dst.len() {
                            if xv[j] > lo && xv[j] < hi {
                                dst[j] += g[j];
                            }
                        }
                    });
                }
                Op::Matmul { a, b, trans_b } => {
                    let at = value_of(*a);
                    let bt = value_of(*b);
                    let gshape = node.value.shape();
                    let gt = Tensor::from_vec(gshape, g.clone())?;
                    if !trans_b {
                        let da = kernels::matmul(&gt, bt, true)?;
                        let db = kernels::matmul_ta(at, &gt)?;
                        acc_into(&mut adjoints, *a, at.numel(), |dst| add_assign(dst, da.data()));
                        acc_into(&mut adjoints, *b, bt.numel(), |dst| add_assign(dst, db.data()));
                    } else {
                        let da = kernels::matmul(&gt, bt, false)?;
                        let db = kernels::matmul_ta(&gt, at)?;
                        acc_into(&mut adjoints, *a, at.numel(), |dst| add_assign(dst, da.data()));
                        acc_into(&mut adjoints, *b, bt.numel(), |dst| add_assign(dst, db.data()));
                    }
                }
                Op::AddBiasRows { x, b } => {
                    let m = value_of(*b).numel();
                    acc_into(&mut adjoints, *x, value_of(*x).numel(), |dst| {
                        add_assign(dst, &g)
                    });
                    acc_into(&mut adjoints, *b, m, |dst| {
                        for row in g.chunks(m) {
                            add_assign(dst, row);
                        }
                    });
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xt = value_of(*x);
                    let wt = value_of(*w);
                    let co = value_of(*b).numel();
                    let dx = kernels::conv2d_grad_input(&g, wt, xt.shape(), *stride, *pad);
                    let dw = kernels::conv2d_grad_weights(&g, xt, wt.shape(), *stride, *pad);
                    let db = kernels::conv2d_grad_bias(&g, co);
                    acc_into(&mut adjoints, *x, xt.numel(), |dst| add_assign(dst, &dx));
                    acc_into(&mut adjoints, *w, wt.numel(), |dst| add_assign(dst, &dw));
                    acc_into(&mut adjoints, *b, co, |dst| add_assign(dst, &db));
                }
                Op::UpsampleBilinear { x, factor } => {
                    let xs = value_of(*x).shape().to_vec();
                    let dx = kernels::upsample_bilinear_adjoint(&g, &xs, *factor);
                    acc_into(&mut adjoints, *x, dx.len(), |dst| add_assign(dst, &dx));
                }
                Op::GlobalAvgPool { x } => {
                    let xs = value_of(*x).shape();
                    let (h, w, c) = (xs[0], xs[1], xs[2]);
                    let inv = T::from_f64(1.0 / (h * w) as f64);
                    acc_into(&mut adjoints, *x, h * w * c, |dst| {
                        for pix in dst.chunks_mut(c) {
                            for (d, &gv) in pix.iter_mut().zip(&g) {
                                *d += gv * inv;
                            }
                        }
                    });
                }
                Op::SoftmaxRows { x } => {
                    let dx = kernels::softmax_rows_adjoint(&node.value, &g);
                    acc_into(&mut adjoints, *x, dx.len(), |dst| add_assign(dst, &dx));
                }
                Op::Reshape { x } => {
                    acc_into(&mut adjoints, *x, value_of(*x).numel(), |dst| {
                        add_assign(dst, &g)
                    });
                }
                Op::Reindex { x, perm } => {
                    acc_into(&mut adjoints, *x, value_of(*x).numel(), |dst| {
                        for (j, &src) in perm.iter().enumerate() {
                            dst[src] += g[j];
                        }
                    });
                }
                Op::ConcatLast { xs } => {
                    let widths: Vec<usize> = xs
                        .iter()
                        .map(|&v| {
                            let s = value_of(v).shape();
                            s[s.len() - 1]
                        })
                        .collect();
                    let total: usize = widths.iter().sum();
                    let rows = node.value.numel() / total;
                    let mut offset = 0;
                    for (idx, &v) in xs.iter().enumerate() {
                        let w = widths[idx];
                        let off = offset;
                        acc_into(&mut adjoints, v, value_of(v).numel(), |dst| {
                            for r in 0..rows {
                                let src = &g[r * total + off..r * total + off + w];
                                add_assign(&mut dst[r * w..(r + 1) * w], src);
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatFlat { xs } => {
                    let mut offset = 0;
                    for &v in xs {
                        let n = value_of(v).numel();
                        let off = offset;
                        acc_into(&mut adjoints, v, n, |dst| {
                            add_assign(dst, &g[off..off + n]);
                        });
                        offset += n;
                    }
                }
                Op::Sum { x } => {
                    let gv = g[0];
                    acc_into(&mut adjoints, *x, value_of(*x).numel(), |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::Mean { x } => {
                    let n = value_of(*x).numel();
                    let gv = g[0] / T::from_usize(n);
                    acc_into(&mut adjoints, *x, n, |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::Dot { a, b } => {
                    let gv = g[0];
                    let av = value_of(*a).data();
                    let bv = value_of(*b).data();
                    acc_into(&mut adjoints, *a, av.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += gv * bv[j];
                        }
                    });
                    acc_into(&mut adjoints, *b, bv.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += gv * av[j];
                        }
                    });
                }
                Op::Fft2 { x } => {
                    // Adjoint of the unnormalized forward transform is the
                    // unnormalized inverse: h*w times the normalized one.
                    let gshape = node.value.shape();
                    let gt = Tensor::from_vec(gshape, g.clone())?;
                    let spec = unstack_spectrum(&gt)?;
                    let (h, w) = (gshape[1], gshape[2]);
                    let (re, _) = fft::ifft2d_parts(&spec)?;
                    let scale = T::from_usize(h * w);
                    acc_into(&mut adjoints, *x, re.numel(), |dst| {
                        for (d, &v) in dst.iter_mut().zip(re.data()) {
                            *d += v * scale;
                        }
                    });
                }
                Op::Ifft2Re { s } => {
                    // Adjoint maps the real-part gradient back through the
                    // normalized inverse: forward transform scaled by 1/(h*w).
                    let gshape = node.value.shape().to_vec();
                    let gt = Tensor::from_vec(&gshape, g.clone())?;
                    let spec = fft::fft2d(&gt)?;
                    let stacked = stack_spectrum(&spec)?;
                    let inv = T::from_f64(1.0 / (gshape[0] * gshape[1]) as f64);
                    acc_into(&mut adjoints, *s, stacked.numel(), |dst| {
                        for (d, &v) in dst.iter_mut().zip(stacked.data()) {
                            *d += v * inv;
                        }
                    });
                }
                Op::ComplexScale { g: filt, s } => {
                    let fv = value_of(*filt).data();
                    let sv = value_of(*s).data();
                    let half = fv.len();
                    acc_into(&mut adjoints, *filt, half, |dst| {
                        for j in 0..half {
                            dst[j] += g[j] * sv[j] + g[half + j] * sv[half + j];
                        }
                    });
                    acc_into(&mut adjoints, *s, 2 * half, |dst| {
                        for j in 0..half {
                            dst[j] += g[j] * fv[j];
                            dst[half + j] += g[half + j] * fv[j];
                        }
                    });
                }
            }
        }
        Ok(BackwardReport { visited })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn acc_into<T: Scalar>(
    adjoints: &mut [Option<Vec<T>>],
    v: Var,
    numel: usize,
    f: impl FnOnce(&mut Vec<T>),
) {
    let slot = adjoints[v.0].get_or_insert_with(|| vec![T::zero(); numel]);
    f(slot);
}

fn stack_spectrum<T: Scalar>(s: &fft::ComplexSpectrum<T>) -> Result<Tensor<T>> {
    let shape = s.shape();
    let mut out = vec![T::zero(); 2 * s.re.numel()];
    out[..s.re.numel()].copy_from_slice(s.re.data());
    out[s.re.numel()..].copy_from_slice(s.im.data());
    Tensor::from_vec(&[2, shape[0], shape[1], shape[2]], out)
}

fn unstack_spectrum<T: Scalar>(t: &Tensor<T>) -> Result<fft::ComplexSpectrum<T>> {
    if t.rank() != 4 || t.shape()[0] != 2 {
        return Err(Error::Shape(format!(
            "expected stacked spectrum (2, h, w, c), got {:?}",
            t.shape()
        )));
    }
    let inner = &t.shape()[1..];
    let half = t.numel() / 2;
    let re = Tensor::from_vec(inner, t.data()[..half].to_vec())?;
    let im = Tensor::from_vec(inner, t.data()[half..].to_vec())?;
    fft::ComplexSpectrum::new(re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with<T: Scalar>(shape: &[usize], data: Vec<T>) -> (ParamStore<T>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .register("p", Tensor::from_vec(shape, data).unwrap())
            .unwrap();
        (store, id)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let (mut store, id) = store_with(&[4], vec![1.0f64, -2.0, 0.5, 3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_square_sum_is_x() {
        let data = vec![1.5f64, -0.25, 2.0];
        let (mut store, id) = store_with(&[3], data.clone());
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.affine(s, 0.5, 0.0);
        tape.backward(loss, &mut store).unwrap();
        for (g, x) in store.get(id).grad().unwrap().iter().zip(&data) {
            assert!((g - x).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let (mut store, id) = store_with(&[3], vec![1.0f64, 2.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let used = store.register("used", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let unused = store.register("unused", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, used);
        let _bound_but_unused = tape.param(&store, unused);
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        store.get(used).grad().unwrap();
        assert!(store.get(unused).grad().is_none() || store.get(unused).grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_visits_every_primitive_once_in_reverse() {
        let (mut store, id) = store_with(&[4], vec![0.1f64, 0.2, 0.3, 0.4]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.relu(x);
        let z = tape.mul(y, y).unwrap();
        let loss = tape.mean(z);
        let report = tape.backward(loss, &mut store).unwrap();
        assert_eq!(report.visited, tape.len());
    }

    #[test]
    fn param_binding_is_memoized() {
        let (store, id) = store_with(&[2], vec![1.0f32, 2.0]);
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }

    /// Central finite differences over a composition touching most ops.
    #[test]
    fn composition_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 4 * 4 * 2;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wdata: Vec<f64> = (0..3 * 3 * 2 * 2).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let eval = |pdata: &[f64], wvals: &[f64], store_grads: Option<&mut Vec<Vec<f64>>>| -> f64 {
            let mut store = ParamStore::<f64>::new();
            let xp = store
                .register("x", Tensor::from_vec(&[4, 4, 2], pdata.to_vec()).unwrap())
                .unwrap();
            let wp = store
                .register("w", Tensor::from_vec(&[3, 3, 2, 2], wvals.to_vec()).unwrap())
                .unwrap();
            let mut tape = Tape::new();
            let x = tape.param(&store, xp);
            let w = tape.param(&store, wp);
            let b = tape.input(Tensor::from_vec(&[2], vec![0.05, -0.02]).unwrap());
            let conv = tape.conv2d(x, w, b, 1, 1).unwrap();
            let act = tape.sigmoid(conv);
            let up = tape.upsample_bilinear(act, 2).unwrap();
            let pooled = tape.global_avg_pool(up).unwrap();
            let flat = tape.reshape(pooled, &[1, 2]).unwrap();
            let soft = tape.softmax_rows(flat).unwrap();
            let spec = tape.fft2(act).unwrap();
            let ones = tape.input(Tensor::filled(&[4, 4, 2], 0.8));
            let filtered = tape.complex_scale(ones, spec).unwrap();
            let back = tape.ifft2_re(filtered).unwrap();
            let e = tape.mul(back, back).unwrap();
            let fe = tape.mean(e);
            let sm = tape.mean(soft);
            let loss = tape.add(fe, sm).unwrap();
            let out = tape.value(loss).item().unwrap();
            if let Some(grads) = store_grads {
                tape.backward(loss, &mut store).unwrap();
                grads.push(store.get(xp).grad().unwrap().to_vec());
                grads.push(store.get(wp).grad().unwrap().to_vec());
            }
            out
        };

        let mut grads = Vec::new();
        eval(&data, &wdata, Some(&mut grads));
        let eps = 1e-5;
        for (pidx, base) in [(0usize, data.clone()), (1usize, wdata.clone())] {
            for i in (0..base.len()).step_by(7) {
                let mut plus = base.clone();
                plus[i] += eps;
                let mut minus = base.clone();
                minus[i] -= eps;
                let (lp, lm) = if pidx == 0 {
                    (eval(&plus, &wdata, None), eval(&minus, &wdata, None))
                } else {
                    (eval(&data, &plus, None), eval(&data, &minus, None))
                };
                let fd = (lp - lm) / (2.0 * eps);
                let ad = grads[pidx][i];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
                assert!(rel < 1e-6, "param {pidx} component {i}: ad={ad} fd={fd}");
            }
        }
    }
}
