//! Gated recurrent scan along one axis of a rank-3 array.
//!
//! Cell (reset `r`, update `z`, candidate `n`):
//!   r = sigmoid(x W_r + b_ir + h W_hr + b_hr)
//!   z = sigmoid(x W_z + b_iz + h W_hz + b_hz)
//!   n = tanh(x W_n + b_in + r * (h W_hn + b_hn))
//!   h' = (1 - z) * n + z * h

use super::array::Array;
use super::linalg::{gemm, MatRef};
use super::ops::sigmoid;
use super::tape::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct GruScan<T> {
    seq_axis: usize,
    reverse: bool,
    hidden: usize,
    // Per row (same layout as the input rows), each `hidden` wide.
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    gh_n: Vec<T>,
    h_prev: Vec<T>,
}

#[derive(Clone, Copy)]
struct Layout {
    batch: usize,
    steps: usize,
    seq_axis: usize,
    reverse: bool,
}

impl Layout {
    fn row(&self, b: usize, l: usize) -> usize {
        if self.seq_axis == 1 {
            b * self.steps + l
        } else {
            l * self.batch + b
        }
    }

    fn order(&self) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..self.steps).rev())
        } else {
            Box::new(0..self.steps)
        }
    }
}

/// Runs a GRU over `x` (`[A0, A1, in]`) along `seq_axis` (0 or 1), treating
/// the other leading axis as the batch. Returns `[A0, A1, hidden]`.
#[allow(clippy::too_many_arguments)]
pub fn gru<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    seq_axis: usize,
    reverse: bool,
) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let node = || format!("gru#{}", tape.len());
    if sx.len() != 3 || seq_axis > 1 {
        return Err(Error::shape(node(), "[A0, A1, in] with seq_axis 0 or 1", (&sx, seq_axis)));
    }
    let input = sx[2];
    let hidden = tape.shape(w_hh)[0];
    let checks = [
        (w_ih, vec![input, 3 * hidden]),
        (w_hh, vec![hidden, 3 * hidden]),
        (b_ih, vec![3 * hidden]),
        (b_hh, vec![3 * hidden]),
    ];
    for (v, expected) in checks {
        if tape.shape(v) != expected.as_slice() {
            return Err(Error::shape(node(), expected, tape.shape(v)));
        }
    }
    let layout = Layout {
        batch: sx[1 - seq_axis],
        steps: sx[seq_axis],
        seq_axis,
        reverse,
    };
    let rows = sx[0] * sx[1];
    let h3 = 3 * hidden;

    let xv = tape.value(x).data();
    let wih = tape.value(w_ih).data();
    let whh = tape.value(w_hh).data();
    let bih = tape.value(b_ih).data();
    let bhh = tape.value(b_hh).data();

    let mut gi = vec![T::zero(); rows * h3];
    gemm(xv, MatRef::new(rows, input, false), wih, MatRef::new(input, h3, false), &mut gi, false);

    let mut out = vec![T::zero(); rows * hidden];
    let mut r = vec![T::zero(); rows * hidden];
    let mut z = vec![T::zero(); rows * hidden];
    let mut n = vec![T::zero(); rows * hidden];
    let mut gh_n = vec![T::zero(); rows * hidden];
    let mut h_prev_all = vec![T::zero(); rows * hidden];

    let bsz = layout.batch;
    let mut h = vec![T::zero(); bsz * hidden];
    let mut gh = vec![T::zero(); bsz * h3];
    for l in layout.order() {
        gemm(&h, MatRef::new(bsz, hidden, false), whh, MatRef::new(hidden, h3, false), &mut gh, false);
        for b in 0..bsz {
            let row = layout.row(b, l);
            let gi_row = &gi[row * h3..(row + 1) * h3];
            let gh_row = &gh[b * h3..(b + 1) * h3];
            for u in 0..hidden {
                let hp = h[b * hidden + u];
                let rr = sigmoid(gi_row[u] + bih[u] + gh_row[u] + bhh[u]);
                let zz = sigmoid(gi_row[hidden + u] + bih[hidden + u] + gh_row[hidden + u] + bhh[hidden + u]);
                let ghn = gh_row[2 * hidden + u] + bhh[2 * hidden + u];
                let nn = (gi_row[2 * hidden + u] + bih[2 * hidden + u] + rr * ghn).tanh();
                let hn = (T::one() - zz) * nn + zz * hp;
                let o = row * hidden + u;
                r[o] = rr;
                z[o] = zz;
                n[o] = nn;
                gh_n[o] = ghn;
                h_prev_all[o] = hp;
                out[o] = hn;
            }
        }
        for b in 0..bsz {
            let row = layout.row(b, l);
            h[b * hidden..(b + 1) * hidden].copy_from_slice(&out[row * hidden..(row + 1) * hidden]);
        }
    }

    let value = Array::new(vec![sx[0], sx[1], hidden], out)?;
    let op = GruScan {
        seq_axis,
        reverse,
        hidden,
        r,
        z,
        n,
        gh_n,
        h_prev: h_prev_all,
    };
    Ok(tape.custom(Box::new(op), &[x, w_ih, w_hh, b_ih, b_hh], value))
}

impl<T: Scalar> CustomOp<T> for GruScan<T> {
    fn name(&self) -> &'static str {
        "gru"
    }

    fn backward(&self, inputs: &[&Array<T>], _output: &Array<T>, grad: &Array<T>) -> Result<Vec<Option<Array<T>>>> {
        let (x, w_ih, w_hh) = (inputs[0], inputs[1], inputs[2]);
        let sx = x.shape();
        let hidden = self.hidden;
        let h3 = 3 * hidden;
        let input = sx[2];
        let rows = sx[0] * sx[1];
        let layout = Layout {
            batch: sx[1 - self.seq_axis],
            steps: sx[self.seq_axis],
            seq_axis: self.seq_axis,
            reverse: self.reverse,
        };
        let bsz = layout.batch;
        let g = grad.data();
        let whh = w_hh.data();

        let mut dgi = vec![T::zero(); rows * h3];
        let mut dwhh = vec![T::zero(); hidden * h3];
        let mut dbhh = vec![T::zero(); h3];
        let mut carry = vec![T::zero(); bsz * hidden];
        let mut dgh = vec![T::zero(); bsz * h3];
        let mut hp = vec![T::zero(); bsz * hidden];

        let forward: Vec<usize> = layout.order().collect();
        for &l in forward.iter().rev() {
            for b in 0..bsz {
                let row = layout.row(b, l);
                for u in 0..hidden {
                    let o = row * hidden + u;
                    let (rr, zz, nn, ghn, hprev) = (self.r[o], self.z[o], self.n[o], self.gh_n[o], self.h_prev[o]);
                    let dh = g[o] + carry[b * hidden + u];
                    let dn = dh * (T::one() - zz);
                    let dz = dh * (hprev - nn);
                    let da_n = dn * (T::one() - nn * nn);
                    let dr = da_n * ghn;
                    let da_z = dz * zz * (T::one() - zz);
                    let da_r = dr * rr * (T::one() - rr);
                    let gi_row = row * h3;
                    dgi[gi_row + u] = da_r;
                    dgi[gi_row + hidden + u] = da_z;
                    dgi[gi_row + 2 * hidden + u] = da_n;
                    let gh_row = b * h3;
                    dgh[gh_row + u] = da_r;
                    dgh[gh_row + hidden + u] = da_z;
                    dgh[gh_row + 2 * hidden + u] = da_n * rr;
                    carry[b * hidden + u] = dh * zz;
                    hp[b * hidden + u] = hprev;
                }
            }
            gemm(&dgh, MatRef::new(bsz, h3, false), whh, MatRef::new(hidden, h3, true), &mut carry, true);
            gemm(&hp, MatRef::new(bsz, hidden, true), &dgh, MatRef::new(bsz, h3, false), &mut dwhh, true);
            for b in 0..bsz {
                for k in 0..h3 {
                    dbhh[k] += dgh[b * h3 + k];
                }
            }
        }

        let mut dwih = vec![T::zero(); input * h3];
        gemm(x.data(), MatRef::new(rows, input, true), &dgi, MatRef::new(rows, h3, false), &mut dwih, false);
        let mut dbih = vec![T::zero(); h3];
        for chunk in dgi.chunks(h3) {
            for (d, &v) in dbih.iter_mut().zip(chunk) {
                *d += v;
            }
        }
        let mut dx = vec![T::zero(); rows * input];
        gemm(&dgi, MatRef::new(rows, h3, false), w_ih.data(), MatRef::new(input, h3, true), &mut dx, false);

        Ok(vec![
            Some(Array::new(sx.to_vec(), dx)?),
            Some(Array::new(vec![input, h3], dwih)?),
            Some(Array::new(vec![hidden, h3], dwhh)?),
            Some(Array::from_vec(dbih)),
            Some(Array::from_vec(dbhh)),
        ])
    }
}
