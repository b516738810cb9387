//! Forward definitions of the tape primitives.

use super::array::{split_axis, Array};
use super::linalg::{gemm, MatRef};
use super::tape::{CustomOp, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_K: f64 = 0.044_715;

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Softmax of `n`-element lanes laid out with stride `inner`.
pub(crate) fn softmax_lanes<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).fold(T::neg_infinity(), |m, k| m.max(x[at(k)]));
            let sum: T = (0..n).map(|k| (x[at(k)] - max).exp()).sum();
            let lse = max + sum.ln();
            for k in 0..n {
                out[at(k)] = if log {
                    x[at(k)] - lse
                } else {
                    (x[at(k)] - max).exp() / sum
                };
            }
        }
    }
    out
}

pub(crate) fn permute_data<T: Scalar>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Array::new(out_shape, out).expect("permutation preserves size")
}

/// Shape bookkeeping for `op(a) @ op(b)` where `b` is either a shared rank-2
/// matrix or batched like `a`.
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub a: MatRef,
    pub b: MatRef,
    pub shared_b: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn plan_matmul(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Option<MatmulPlan> {
    if sa.len() < 2 || sb.len() < 2 {
        return None;
    }
    let ra = sa.len();
    let rb = sb.len();
    let a = MatRef::new(sa[ra - 2], sa[ra - 1], ta);
    let b = MatRef::new(sb[rb - 2], sb[rb - 1], tb);
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    if k != k2 {
        return None;
    }
    let shared_b = rb == 2;
    if !shared_b && sa[..ra - 2] != sb[..rb - 2] {
        return None;
    }
    let batch = sa[..ra - 2].iter().product();
    let mut out_shape = sa[..ra - 2].to_vec();
    out_shape.extend([m, n]);
    Some(MatmulPlan {
        batch,
        a,
        b,
        shared_b,
        out_shape,
    })
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                format!("{name}#{}", self.len()),
                self.shape(a),
                self.shape(b),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f);
        Ok(self.push(value, op))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(&mut self, name: &str, a: Var, row: Var, mul: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sr = self.shape(row);
        let n = *sa.last().unwrap_or(&0);
        if sr != [n] {
            return Err(Error::shape(format!("{name}#{}", self.len()), [n], sr));
        }
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(n.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(&r) {
                if mul {
                    *x *= y
                } else {
                    *x += y
                }
            }
        }
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(value, op))
    }

    /// `a + row`, broadcasting a rank-1 `row` along the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, false)
    }

    /// `a * row`, broadcasting a rank-1 `row` along the last axis of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, true)
    }

    fn scalar_broadcast(&mut self, name: &str, a: Var, s: Var, mul: bool) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!("{name}#{}", self.len()), "[]", self.shape(s)));
        }
        let sv = self.value(s).item();
        let value = if mul {
            self.value(a).map(|x| x * sv)
        } else {
            self.value(a).map(|x| x + sv)
        };
        let op = if mul { Op::MulScalar(a, s) } else { Op::AddScalar(a, s) };
        Ok(self.push(value, op))
    }

    /// `a + s` for a single-element `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.scalar_broadcast("add_scalar", a, s, false)
    }

    /// `a * s` for a single-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.scalar_broadcast("mul_scalar", a, s, true)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, T::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// `op(a) @ op(b)` over the last two axes. `b` is either rank 2 (shared
    /// across the leading axes of `a`) or carries the same leading axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = plan_matmul(&sa, &sb, ta, tb).ok_or_else(|| {
            Error::shape(format!("matmul#{}", self.len()), sa.clone(), sb.clone())
        })?;
        let (m, _) = plan.a.logical();
        let (_, n) = plan.b.logical();
        let mut out = vec![T::zero(); plan.out_shape.iter().product()];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let a_size = plan.a.rows * plan.a.cols;
        let b_size = plan.b.rows * plan.b.cols;
        if plan.shared_b && !ta {
            let flat = MatRef::new(plan.batch * plan.a.rows, plan.a.cols, false);
            gemm(av, flat, bv, plan.b, &mut out, false);
        } else {
            for bi in 0..plan.batch {
                let bs = if plan.shared_b { 0 } else { bi * b_size };
                gemm(
                    &av[bi * a_size..],
                    plan.a,
                    &bv[bs..],
                    plan.b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let value = Array::new(plan.out_shape, out)?;
        Ok(self.push(value, Op::Matmul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permute#{}", self.len()), rank, perm));
        }
        let value = permute_data(self.value(x), perm);
        Ok(self.push(value, Op::Permute(x, perm.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape(format!("transpose#{}", self.len()), ">= 2 axes", rank));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|_| Error::shape(format!("reshape#{}", self.len()), shape, self.shape(x)))?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    fn check_axis(&self, name: &str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(
                format!("{name}#{}", self.len()),
                format!("axis < {}", self.shape(x).len()),
                axis,
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let v = self.value(x);
        let data = softmax_lanes(v.data(), v.shape(), axis, false);
        let value = Array::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let v = self.value(x);
        let data = softmax_lanes(v.data(), v.shape(), axis, true);
        let value = Array::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(x, axis)))
    }

    /// Normalizes the last axis, then applies `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::shape(format!("layer_norm#{}", self.len()), [n], self.shape(p)));
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut value = self.value(x).clone();
        let nt = T::from_usize(n).unwrap_or_else(T::one);
        for lane in value.data_mut().chunks_mut(n.max(1)) {
            let mean = lane.iter().copied().sum::<T>() / nt;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rstd = T::one() / (var + eps).sqrt();
            for (k, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[k] + b[k];
            }
        }
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Rows of a rank-2 `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape(format!("embedding#{}", self.len()), "rank 2 table", st));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("embedding id {bad} out of range 0..{rows}")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Array::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let nt = T::from_usize(n).unwrap_or_else(T::one);
        let src = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + k) * inner + i];
                }
            }
        }
        for x in &mut out {
            *x /= nt;
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::Mean(x, axis)))
    }

    /// Sum of all elements, as a rank-0 array.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero arrays"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat#{}", self.len()), &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        if start + len > n {
            return Err(Error::shape(
                format!("slice#{}", self.len()),
                format!("{start}+{len} <= {n}"),
                v.shape(),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    /// Index of the largest element (flattened). Not differentiable.
    pub fn argmax(&mut self, x: Var) -> Var {
        let v = self.value(x).data();
        let mut best = 0;
        for (i, &val) in v.iter().enumerate() {
            if val > v[best] {
                best = i;
            }
        }
        let value = Array::scalar(T::from_usize(best).unwrap_or_else(T::zero));
        self.push(value, Op::Argmax(x))
    }

    /// Records a primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], output: Array<T>) -> Var {
        self.push(output, Op::Custom(op, inputs.to_vec()))
    }
}
