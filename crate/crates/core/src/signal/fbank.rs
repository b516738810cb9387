use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::stft::hann;
use super::Waveform;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FbankConfig {
    pub num_filters: usize,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub low_hz: f64,
    pub floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            num_filters: 80,
            window_ms: 25.0,
            shift_ms: 10.0,
            low_hz: 20.0,
            floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// `floor((len - window) / shift) + 1`, or 0 when shorter than a window.
    pub fn frames(&self, len: usize, sample_rate: u32) -> usize {
        let win = self.window_samples(sample_rate);
        if len < win {
            0
        } else {
            (len - win) / self.shift_samples(sample_rate) + 1
        }
    }
}

/// Log mel-filterbank energies, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FbankFeatures<T> {
    /// `[T, num_filters]`
    pub frames: Array<T>,
    pub frame_shift_ms: f64,
    pub window_ms: f64,
}

impl<T: Scalar> FbankFeatures<T> {
    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.frames.dim(1)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

/// Triangular filters, equally spaced on the mel scale between `low_hz` and
/// Nyquist, sampled at the FFT bin frequencies. Returns `[filters][bins]`.
pub(crate) fn mel_filters(num_filters: usize, n_fft: usize, sample_rate: u32, low_hz: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(nyquist));
    let delta = (hi - lo) / (num_filters + 1) as f64;
    (0..num_filters)
        .map(|m| {
            let left = lo + m as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            (0..bins)
                .map(|k| {
                    let mel = hz_to_mel(k as f64 * sample_rate as f64 / n_fft as f64);
                    if mel <= left || mel >= right {
                        0.0
                    } else if mel <= center {
                        (mel - left) / (center - left)
                    } else {
                        (right - mel) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// 80-dimensional log mel filterbank (25 ms Hann window, 10 ms shift, no
/// padding) with power spectra from a zero-padded FFT of at least 512 points.
pub fn fbank<T: Scalar>(w: &Waveform<T>, config: &FbankConfig) -> Result<FbankFeatures<T>> {
    let sr = w.sample_rate();
    if sr != 8000 && sr != 16000 {
        return Err(Error::invalid(format!("fbank supports 8000 or 16000 Hz, got {sr}")));
    }
    let win = config.window_samples(sr);
    let shift = config.shift_samples(sr);
    let n_fft = win.next_power_of_two().max(512);
    let frames = config.frames(w.len(), sr);
    let filters = mel_filters(config.num_filters, n_fft, sr, config.low_hz);
    let window = hann::<f64>(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let x = w.samples();
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut out = Vec::with_capacity(frames * config.num_filters);
    for t in 0..frames {
        let start = t * shift;
        for (m, slot) in buf.iter_mut().enumerate() {
            let v = if m < win { x[start + m].as_f64() * window[m] } else { 0.0 };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for f in &filters {
            let e: f64 = f.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(T::of(e.max(config.floor).ln()));
        }
    }
    Ok(FbankFeatures {
        frames: Array::new(vec![frames, config.num_filters], out)?,
        frame_shift_ms: config.shift_ms,
        window_ms: config.window_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::<f64>::silence(16000, 16000);
        let f = fbank(&w, &FbankConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 80);
    }

    #[test]
    fn zero_signal_hits_the_floor() {
        let w = Waveform::<f64>::silence(8000, 8000);
        let f = fbank(&w, &FbankConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(f.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn every_filter_covers_a_bin() {
        for sr in [8000, 16000] {
            for f in mel_filters(80, 512, sr, 20.0) {
                assert!(f.iter().any(|&w| w > 0.0), "empty filter at {sr} Hz");
            }
        }
    }

    #[test]
    fn rejects_other_rates() {
        let w = Waveform::<f64>::silence(100, 22050);
        assert!(fbank(&w, &FbankConfig::default()).is_err());
    }
}
