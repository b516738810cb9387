use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::autodiff::{Array, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 512,
            hop: 128,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.window_len.is_power_of_two() || self.window_len < 2 {
            return Err(Error::invalid(format!("window length {} is not a power of two", self.window_len)));
        }
        if self.hop == 0 || self.window_len % self.hop != 0 {
            return Err(Error::invalid(format!(
                "hop {} does not divide window length {}",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Frames produced for a signal of `len` samples (centered framing).
    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Longest output an ISTFT over `frames` frames can reconstruct.
    pub fn reconstructable_len(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop + self.window_len / 2
    }

    fn pad(&self) -> usize {
        self.window_len / 2
    }
}

/// One-sided complex spectrogram stored as real and imaginary `[F, T]` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub re: Array<T>,
    pub im: Array<T>,
    pub config: StftConfig,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn bins(&self) -> usize {
        self.re.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.re.dim(1)
    }

    pub fn zeros(config: StftConfig, frames: usize) -> Self {
        let shape = [config.bins(), frames];
        Self {
            re: Array::zeros(&shape),
            im: Array::zeros(&shape),
            config,
        }
    }

    /// Elementwise complex product with a mask given as `[F, T]` planes.
    pub fn multiply(&self, mask_re: &Array<T>, mask_im: &Array<T>) -> Self {
        let re = Array::new(
            self.re.shape().to_vec(),
            (0..self.re.len())
                .map(|k| self.re.data()[k] * mask_re.data()[k] - self.im.data()[k] * mask_im.data()[k])
                .collect(),
        )
        .expect("same shape");
        let im = Array::new(
            self.re.shape().to_vec(),
            (0..self.re.len())
                .map(|k| self.re.data()[k] * mask_im.data()[k] + self.im.data()[k] * mask_re.data()[k])
                .collect(),
        )
        .expect("same shape");
        Self {
            re,
            im,
            config: self.config,
        }
    }
}

/// Periodic Hann window.
pub(crate) fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let phase = T::of(2.0) * T::PI() * T::from_usize(i).unwrap() / T::from_usize(n).unwrap();
            T::of(0.5) - T::of(0.5) * phase.cos()
        })
        .collect()
}

/// Mirror index without repeating the edge sample, folding as often as needed.
fn reflect(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

/// Hann-windowed one-sided STFT with `window_len / 2` reflection padding at
/// both ends, so frame `t` is centered on sample `t * hop`.
pub fn stft<T: Scalar>(w: &Waveform<T>, config: StftConfig) -> Result<ComplexSpectrogram<T>> {
    config.validate()?;
    if w.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    let x = w.samples();
    let n = config.window_len;
    let bins = config.bins();
    let frames = config.frames(x.len());
    let pad = config.pad() as isize;
    let window = hann::<T>(n);
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut re = Array::zeros(&[bins, frames]);
    let mut im = Array::zeros(&[bins, frames]);
    for t in 0..frames {
        let start = (t * config.hop) as isize - pad;
        for (m, slot) in buf.iter_mut().enumerate() {
            let s = x[reflect(start + m as isize, x.len())];
            *slot = Complex::new(s * window[m], T::zero());
        }
        fft.process(&mut buf);
        for k in 0..bins {
            re.data_mut()[k * frames + t] = buf[k].re;
            im.data_mut()[k * frames + t] = buf[k].im;
        }
    }
    Ok(ComplexSpectrogram { re, im, config })
}

struct Synthesis<T> {
    config: StftConfig,
    frames: usize,
    out_len: usize,
    window: Vec<T>,
    norm: Vec<T>,
}

impl<T: Scalar> Synthesis<T> {
    fn new(config: StftConfig, frames: usize, out_len: usize) -> Result<Self> {
        config.validate()?;
        let limit = config.reconstructable_len(frames);
        if out_len > limit {
            return Err(Error::invalid(format!(
                "requested {out_len} samples but {frames} frames reconstruct at most {limit}"
            )));
        }
        let n = config.window_len;
        let window = hann::<T>(n);
        let total = (frames.max(1) - 1) * config.hop + n;
        let mut norm = vec![T::zero(); total];
        for t in 0..frames {
            for m in 0..n {
                norm[t * config.hop + m] += window[m] * window[m];
            }
        }
        Ok(Self {
            config,
            frames,
            out_len,
            window,
            norm,
        })
    }

    fn run(&self, re: &[T], im: &[T]) -> Vec<T> {
        let n = self.config.window_len;
        let bins = self.config.bins();
        let frames = self.frames;
        let ifft = FftPlanner::<T>::new().plan_fft_inverse(n);
        let mut acc = vec![T::zero(); self.norm.len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let scale = T::one() / T::from_usize(n).unwrap();
        for t in 0..frames {
            for k in 0..bins {
                let mut c = Complex::new(re[k * frames + t], im[k * frames + t]);
                if k == 0 || k == n / 2 {
                    c.im = T::zero();
                }
                buf[k] = c;
                if k > 0 && k < n / 2 {
                    buf[n - k] = c.conj();
                }
            }
            ifft.process(&mut buf);
            for m in 0..n {
                acc[t * self.config.hop + m] += self.window[m] * buf[m].re * scale;
            }
        }
        let pad = self.config.pad();
        (0..self.out_len)
            .map(|i| {
                let d = self.norm[i + pad];
                if d > T::zero() {
                    acc[i + pad] / d
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    /// Adjoint of [`Synthesis::run`] with respect to the real and imaginary planes.
    fn adjoint(&self, grad: &[T]) -> (Vec<T>, Vec<T>) {
        let n = self.config.window_len;
        let bins = self.config.bins();
        let frames = self.frames;
        let pad = self.config.pad();
        let mut gy = vec![T::zero(); self.norm.len()];
        for (i, &g) in grad.iter().enumerate() {
            let d = self.norm[i + pad];
            if d > T::zero() {
                gy[i + pad] = g / d;
            }
        }
        let fft = FftPlanner::<T>::new().plan_fft_forward(n);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut dre = vec![T::zero(); bins * frames];
        let mut dim = vec![T::zero(); bins * frames];
        let inv_n = T::one() / T::from_usize(n).unwrap();
        for t in 0..frames {
            for (m, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(self.window[m] * gy[t * self.config.hop + m], T::zero());
            }
            fft.process(&mut buf);
            for k in 0..bins {
                let edge = k == 0 || k == n / 2;
                let c = if edge { inv_n } else { T::of(2.0) * inv_n };
                dre[k * frames + t] = c * buf[k].re;
                dim[k * frames + t] = if edge { T::zero() } else { c * buf[k].im };
            }
        }
        (dre, dim)
    }
}

/// Weighted overlap-add inverse of [`stft`], normalized by the summed squared
/// window and trimmed to `out_len` samples.
pub fn istft<T: Scalar>(s: &ComplexSpectrogram<T>, out_len: usize, sample_rate: u32) -> Result<Waveform<T>> {
    if s.re.shape() != s.im.shape() || s.bins() != s.config.bins() {
        return Err(Error::shape("istft", [s.config.bins(), s.frames()], s.im.shape()));
    }
    let synth = Synthesis::new(s.config, s.frames(), out_len)?;
    Waveform::new(synth.run(s.re.data(), s.im.data()), sample_rate)
}

impl<T: Scalar> CustomOp<T> for Synthesis<T> {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(&self, _inputs: &[&Array<T>], _output: &Array<T>, grad: &Array<T>) -> Result<Vec<Option<Array<T>>>> {
        let (dre, dim) = self.adjoint(grad.data());
        let shape = vec![self.config.bins(), self.frames];
        Ok(vec![
            Some(Array::new(shape.clone(), dre)?),
            Some(Array::new(shape, dim)?),
        ])
    }
}

/// Differentiable ISTFT of `[F, T]` real and imaginary planes recorded on a tape.
pub fn istft_on_tape<T: Scalar>(tape: &mut Tape<T>, re: Var, im: Var, config: StftConfig, out_len: usize) -> Result<Var> {
    let shape = tape.shape(re).to_vec();
    if shape.len() != 2 || shape[0] != config.bins() || tape.shape(im) != shape.as_slice() {
        return Err(Error::shape(
            format!("istft#{}", tape.len()),
            [config.bins(), shape.get(1).copied().unwrap_or(0)],
            tape.shape(im),
        ));
    }
    let synth = Synthesis::new(config, shape[1], out_len)?;
    let out = synth.run(tape.value(re).data(), tape.value(im).data());
    Ok(tape.custom(Box::new(synth), &[re, im], Array::from_vec(out)))
}
