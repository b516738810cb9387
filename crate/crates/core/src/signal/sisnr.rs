use super::Waveform;
use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stabilizer added to both energies in the training loss.
pub const SI_SNR_LOSS_EPS: f64 = 1e-8;

fn check<T: Scalar>(reference: &[T], estimate: &[T]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch(reference.len(), estimate.len()));
    }
    if reference.iter().all(|x| x.is_zero()) {
        return Err(Error::ZeroReference);
    }
    Ok(())
}

/// Scale-invariant SNR in dB, computed on the raw signals:
/// `s = (<est, ref> / |ref|^2) ref`, `e = est - s`, `10 log10(|s|^2 / |e|^2)`.
///
/// Returns `+inf` when the residual is exactly zero and an error for an
/// all-zero estimate.
pub fn si_snr<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<f64> {
    let y: Vec<f64> = reference.samples().iter().map(|x| x.as_f64()).collect();
    let e: Vec<f64> = estimate.samples().iter().map(|x| x.as_f64()).collect();
    check(&y, &e)?;
    if e.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("SI-SNR of an all-zero estimate is undefined"));
    }
    let dot: f64 = y.iter().zip(&e).map(|(a, b)| a * b).sum();
    let energy: f64 = y.iter().map(|a| a * a).sum();
    let alpha = dot / energy;
    let (mut target, mut noise) = (0.0, 0.0);
    for (&yi, &ei) in y.iter().zip(&e) {
        let s = alpha * yi;
        target += s * s;
        noise += (ei - s) * (ei - s);
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / noise).log10())
}

/// Negative SI-SNR of a tape-recorded estimate against a fixed reference,
/// with [`SI_SNR_LOSS_EPS`] added to both energies.
pub fn si_snr_loss<T: Scalar>(tape: &mut Tape<T>, reference: &[T], estimate: Var) -> Result<Var> {
    let est_len = tape.value(estimate).len();
    check(reference, &vec![T::zero(); est_len])?;
    let energy: T = reference.iter().map(|&x| x * x).sum();
    let y = tape.input(Array::from_vec(reference.to_vec()));
    let est = tape.reshape(estimate, &[est_len])?;
    let prod = tape.mul(est, y)?;
    let dot = tape.sum(prod);
    let alpha = tape.scale(dot, T::one() / energy);
    let target = tape.mul_scalar(y, alpha)?;
    let noise = tape.sub(est, target)?;
    let t2 = tape.square(target);
    let t_energy = tape.sum(t2);
    let n2 = tape.square(noise);
    let n_energy = tape.sum(n2);
    let eps = T::of(SI_SNR_LOSS_EPS);
    let num = tape.offset(t_energy, eps);
    let den = tape.offset(n_energy, eps);
    let ratio = tape.div(num, den)?;
    let ln = tape.ln(ratio);
    Ok(tape.scale(ln, T::of(-10.0 / std::f64::consts::LN_10)))
}
