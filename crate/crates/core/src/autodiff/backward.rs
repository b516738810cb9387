//! Vector-Jacobian products of the tape primitives.

use super::array::{split_axis, Array};
use super::linalg::{gemm, MatRef};
use super::ops::{gelu_grad, permute_data, plan_matmul, sigmoid};
use super::tape::{Op, Tape};
use crate::error::Result;
use crate::scalar::Scalar;

type Grads<T> = Vec<Option<Array<T>>>;

fn reduce_rows<T: Scalar>(g: &Array<T>, n: usize, weight: Option<&[T]>) -> Array<T> {
    let mut out = vec![T::zero(); n];
    for (k, &v) in g.data().iter().enumerate() {
        let w = weight.map_or(T::one(), |w| w[k]);
        out[k % n] += v * w;
    }
    Array::from_vec(out)
}

impl<T: Scalar> Tape<T> {
    pub(crate) fn node_backward(&self, i: usize, g: &Array<T>) -> Result<Grads<T>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: super::tape::Var| self.value(v);
        let out = match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub(_, _) => vec![Some(g.clone()), Some(g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                Some(g.zip_map(val(*b), |g, b| g * b)),
                Some(g.zip_map(val(*a), |g, a| g * a)),
            ],
            Op::Div(a, b) => {
                let bv = val(*b);
                let da = g.zip_map(bv, |g, b| g / b);
                let mut db = g.zip_map(val(*a), |g, a| g * a);
                for (d, &b) in db.data_mut().iter_mut().zip(bv.data()) {
                    *d = -*d / (b * b);
                }
                vec![Some(da), Some(db)]
            }
            Op::AddRow(_, row) => {
                let n = val(*row).len();
                vec![Some(g.clone()), Some(reduce_rows(g, n, None))]
            }
            Op::MulRow(a, row) => {
                let r = val(*row).data();
                let n = r.len();
                let mut da = g.clone();
                for chunk in da.data_mut().chunks_mut(n.max(1)) {
                    for (x, &w) in chunk.iter_mut().zip(r) {
                        *x *= w;
                    }
                }
                vec![Some(da), Some(reduce_rows(g, n, Some(val(*a).data())))]
            }
            Op::AddScalar(_, s) => {
                let ds = Array::full(val(*s).shape(), g.sum());
                vec![Some(g.clone()), Some(ds)]
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                let dot: T = g.data().iter().zip(val(*a).data()).map(|(&g, &a)| g * a).sum();
                vec![Some(g.map(|x| x * sv)), Some(Array::full(val(*s).shape(), dot))]
            }
            Op::Scale(_, c) => vec![Some(g.map(|x| x * *c))],
            Op::Offset(_) => vec![Some(g.clone())],
            Op::Exp(_) => vec![Some(g.zip_map(y, |g, y| g * y))],
            Op::Ln(x) => vec![Some(g.zip_map(val(*x), |g, x| g / x))],
            Op::Sqrt(_) => vec![Some(g.zip_map(y, |g, y| g / (T::of(2.0) * y)))],
            Op::Square(x) => vec![Some(g.zip_map(val(*x), |g, x| T::of(2.0) * g * x))],
            Op::Tanh(_) => vec![Some(g.zip_map(y, |g, y| g * (T::one() - y * y)))],
            Op::Sigmoid(x) => vec![Some(g.zip_map(val(*x), |g, x| {
                let s = sigmoid(x);
                g * s * (T::one() - s)
            }))],
            Op::Gelu(x) => vec![Some(g.zip_map(val(*x), |g, x| g * gelu_grad(x)))],
            Op::Relu(x) => vec![Some(g.zip_map(val(*x), |g, x| if x > T::zero() { g } else { T::zero() }))],
            Op::Matmul { a, b, ta, tb } => {
                let (da, db) = matmul_backward(val(*a), val(*b), *ta, *tb, g);
                vec![Some(da), Some(db)]
            }
            Op::Permute(_, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(permute_data(g, &inv))]
            }
            Op::Reshape(x) => vec![Some(g.clone().reshape(val(*x).shape())?)],
            Op::Softmax(_, axis) => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: T = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![Some(Array::new(y.shape().to_vec(), dx)?)]
            }
            Op::LogSoftmax(_, axis) => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let total: T = (0..n).map(|k| gd[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = gd[at(k)] - yd[at(k)].exp() * total;
                        }
                    }
                }
                vec![Some(Array::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm { x, gamma, eps, .. } => {
                let xv = val(*x);
                let gam = val(*gamma).data();
                let n = gam.len();
                let nt = T::from_usize(n).unwrap_or_else(T::one);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for (lane_idx, lane) in xv.data().chunks(n.max(1)).enumerate() {
                    let base = lane_idx * n;
                    let gl = &g.data()[base..base + n];
                    let mean = lane.iter().copied().sum::<T>() / nt;
                    let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                    let rstd = T::one() / (var + *eps).sqrt();
                    for k in 0..n {
                        xhat[k] = (lane[k] - mean) * rstd;
                        dxhat[k] = gl[k] * gam[k];
                        dgamma[k] += gl[k] * xhat[k];
                        dbeta[k] += gl[k];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / nt;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nt;
                    for k in 0..n {
                        dx[base + k] = rstd * (dxhat[k] - m1 - xhat[k] * m2);
                    }
                }
                vec![
                    Some(Array::new(xv.shape().to_vec(), dx)?),
                    Some(Array::from_vec(dgamma)),
                    Some(Array::from_vec(dbeta)),
                ]
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut dt = Array::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (dst, &s) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                vec![Some(dt)]
            }
            Op::Mean(x, axis) => {
                let xv = val(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let nt = T::from_usize(n).unwrap_or_else(T::one);
                let mut dx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g.data()[o * inner + i] / nt;
                        }
                    }
                }
                vec![Some(Array::new(xv.shape().to_vec(), dx)?)]
            }
            Op::Sum(x) => vec![Some(Array::full(val(*x).shape(), g.item()))],
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut parts: Vec<Vec<T>> = xs.iter().map(|&x| Vec::with_capacity(val(x).len())).collect();
                for o in 0..outer {
                    let mut offset = 0;
                    for (p, &x) in parts.iter_mut().zip(xs) {
                        let n = val(x).shape()[*axis];
                        let base = (o * total + offset) * inner;
                        p.extend_from_slice(&g.data()[base..base + n * inner]);
                        offset += n;
                    }
                }
                xs.iter()
                    .zip(parts)
                    .map(|(&x, p)| Array::new(val(x).shape().to_vec(), p).map(Some))
                    .collect::<Result<_>>()?
            }
            Op::Slice { x, axis, start } => {
                let xv = val(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(Array::new(xv.shape().to_vec(), dx)?)]
            }
            Op::Argmax(_) => vec![None],
            Op::Custom(op, xs) => {
                let inputs: Vec<&Array<T>> = xs.iter().map(|&x| val(x)).collect();
                op.backward(&inputs, y, g)?
            }
        };
        Ok(out)
    }
}

fn matmul_backward<T: Scalar>(a: &Array<T>, b: &Array<T>, ta: bool, tb: bool, g: &Array<T>) -> (Array<T>, Array<T>) {
    let plan = plan_matmul(a.shape(), b.shape(), ta, tb).expect("validated in forward");
    let (m, k) = plan.a.logical();
    let (_, n) = plan.b.logical();
    let a_size = m * k;
    let b_size = k * n;
    let mut da = Array::zeros(a.shape());
    let mut db = Array::zeros(b.shape());
    let gd = g.data();
    let (ad, bd) = (a.data(), b.data());
    let dc = |bi: usize| &gd[bi * m * n..(bi + 1) * m * n];
    let a_t = MatRef::new(plan.a.rows, plan.a.cols, !ta);
    let b_t = MatRef::new(plan.b.rows, plan.b.cols, !tb);
    let gref = MatRef::new(m, n, false);
    let gref_t = MatRef::new(m, n, true);

    if plan.shared_b && !ta {
        // Leading axes fold into rows: one gemm for each gradient.
        let rows = plan.batch * m;
        let flat_g = MatRef::new(rows, n, false);
        gemm(gd, flat_g, bd, b_t, da.data_mut(), false);
        let flat_a_t = MatRef::new(rows, k, true);
        if tb {
            gemm(gd, MatRef::new(rows, n, true), ad, MatRef::new(rows, k, false), db.data_mut(), false);
        } else {
            gemm(ad, flat_a_t, gd, flat_g, db.data_mut(), false);
        }
        return (da, db);
    }

    for bi in 0..plan.batch {
        let a_s = &ad[bi * a_size..(bi + 1) * a_size];
        let b_off = if plan.shared_b { 0 } else { bi * b_size };
        let b_s = &bd[b_off..b_off + b_size];
        let da_s = &mut da.data_mut()[bi * a_size..(bi + 1) * a_size];
        if ta {
            gemm(b_s, plan.b, dc(bi), gref_t, da_s, false);
        } else {
            gemm(dc(bi), gref, b_s, b_t, da_s, false);
        }
        let db_s = &mut db.data_mut()[b_off..b_off + b_size];
        let accumulate = plan.shared_b && bi > 0;
        if tb {
            gemm(dc(bi), gref_t, a_s, plan.a, db_s, accumulate);
        } else {
            gemm(a_s, a_t, dc(bi), gref, db_s, accumulate);
        }
    }
    (da, db)
}
