//! Deterministic DSP kernels: STFT/ISTFT, log-mel features, mixing, SI-SNR.

mod fbank;
mod mix;
mod sisnr;
mod stft;
pub mod wav;

pub use fbank::{fbank, FbankConfig, FbankFeatures};
pub use mix::{mix, MixProtocol};
pub use sisnr::{si_snr, si_snr_loss, SI_SNR_LOSS_EPS};
pub use stft::{istft, istft_on_tape, stft, ComplexSpectrogram, StftConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mono signal with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![T::zero(); len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: T) -> Self {
        Self {
            samples: self.samples.iter().map(|&x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn is_silent(&self) -> bool {
        self.samples.iter().all(|x| x.is_zero())
    }
}
