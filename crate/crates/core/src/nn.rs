//! Parameterized layers shared by the cue encoder and the extraction
//! backbone. Each layer reads its parameters from a `ParamStore` under a
//! dotted name prefix.

use crate::autodiff::{Array, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn init_linear<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    store.init_matrix(&format!("{prefix}.weight"), fan_in, fan_out);
    if bias {
        store.init_zeros(&format!("{prefix}.bias"), &[fan_out]);
    }
}

/// `x @ W (+ b)` over the last axis of `x`; the bias is used when present.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if store.contains(&bias) {
        let b = tape.param(store, &bias)?;
        tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.init_full(&format!("{prefix}.gamma"), &[dim], T::one());
    store.init_zeros(&format!("{prefix}.beta"), &[dim]);
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gamma"))?;
    let b = tape.param(store, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, T::of(LAYER_NORM_EPS))
}

pub fn init_attention<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    for p in ["q", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), dim, dim, true);
    }
    // a key bias only shifts every score of a query equally
    init_linear(store, &format!("{prefix}.k"), dim, dim, false);
}

/// Scaled dot-product multi-head attention of `queries [T, D]` over
/// `memory [L, D]`. Returns the projected context `[T, D]` and the attention
/// weights `[H, T, L]` (softmax over `L`).
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    queries: Var,
    memory: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let (t, d) = dims2(tape, queries)?;
    let (l, dm) = dims2(tape, memory)?;
    if d != dm || heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("{prefix}.attention"), [t, d], [l, dm]));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, x: Var, n: usize| -> Result<Var> {
        let r = tape.reshape(x, &[n, heads, dh])?;
        tape.permute(r, &[1, 0, 2])
    };
    let q = linear(tape, store, &format!("{prefix}.q"), queries)?;
    let k = linear(tape, store, &format!("{prefix}.k"), memory)?;
    let v = linear(tape, store, &format!("{prefix}.v"), memory)?;
    let q = split(tape, q, t)?;
    let k = split(tape, k, l)?;
    let v = split(tape, v, l)?;
    let scores = tape.matmul_t(q, k, false, true)?;
    let scores = tape.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, &[t, d])?;
    let out = linear(tape, store, &format!("{prefix}.o"), ctx)?;
    Ok((out, weights))
}

pub fn init_feed_forward<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, hidden: usize) {
    init_linear(store, &format!("{prefix}.fc1"), dim, hidden, true);
    init_linear(store, &format!("{prefix}.fc2"), hidden, dim, true);
}

pub fn feed_forward<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, store, &format!("{prefix}.fc2"), h)
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Array<T> {
    let mut data = vec![T::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data[pos * dim + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Array::new(vec![len, dim], data).expect("sized")
}

pub(crate) fn dims2<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [a, b] => Ok((a, b)),
        ref other => Err(Error::shape(tape.label(x), "rank 2", other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_weights_are_distributions() {
        let mut store = ParamStore::<f64>::new(1);
        init_attention(&mut store, "att", 8);
        let mut tape = Tape::new();
        let q = tape.input(sinusoidal_positions(5, 8));
        let m = tape.input(sinusoidal_positions(3, 8).map(|x| x * 2.0));
        let (out, w) = attention(&mut tape, &store, "att", q, m, 2).unwrap();
        assert_eq!(tape.shape(out), &[5, 8]);
        assert_eq!(tape.shape(w), &[2, 5, 3]);
        for lane in tape.value(w).data().chunks(3) {
            assert!((lane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_start_with_sin_cos() {
        let p = sinusoidal_positions::<f64>(2, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
    }
}
