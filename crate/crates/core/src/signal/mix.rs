use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How two sources of different length are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixProtocol {
    /// Truncate both to the shorter source (fully overlapped).
    Min,
    /// Zero-pad the shorter source to the longer one.
    Max,
}

impl std::str::FromStr for MixProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(MixProtocol::Min),
            "max" => Ok(MixProtocol::Max),
            other => Err(Error::invalid(format!("unknown mixing protocol {other:?}"))),
        }
    }
}

impl MixProtocol {
    pub fn length(self, a: usize, b: usize) -> usize {
        match self {
            MixProtocol::Min => a.min(b),
            MixProtocol::Max => a.max(b),
        }
    }
}

/// `gain1 * s1 + gain2 * s2` under the given length protocol.
///
/// Gains are not range-checked here; the corpus draws them from [0.1, 0.9].
pub fn mix<T: Scalar>(s1: &Waveform<T>, s2: &Waveform<T>, gain1: T, gain2: T, protocol: MixProtocol) -> Result<Waveform<T>> {
    if s1.sample_rate() != s2.sample_rate() {
        return Err(Error::SampleRateMismatch(s1.sample_rate(), s2.sample_rate()));
    }
    if !gain1.is_finite() || !gain2.is_finite() {
        return Err(Error::invalid("mixing gains must be finite"));
    }
    let len = protocol.length(s1.len(), s2.len());
    let at = |s: &Waveform<T>, i: usize| s.samples().get(i).copied().unwrap_or_else(T::zero);
    let samples = (0..len).map(|i| gain1 * at(s1, i) + gain2 * at(s2, i)).collect();
    Waveform::new(samples, s1.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(x: &[f64]) -> Waveform<f64> {
        Waveform::new(x.to_vec(), 8000).unwrap()
    }

    #[test]
    fn min_protocol_example() {
        let out = mix(&w(&[1.0, 1.0]), &w(&[1.0, -1.0]), 0.5, 0.5, MixProtocol::Min).unwrap();
        assert_eq!(out.samples(), &[1.0, 0.0]);
    }

    #[test]
    fn max_protocol_keeps_the_longer_tail() {
        let s1 = w(&[0.2, 0.4, 0.6, 0.8]);
        let s2 = w(&[1.0, 1.0]);
        let out = mix(&s1, &s2, 0.5, 0.3, MixProtocol::Max).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(&out.samples()[2..], &[0.5 * 0.6, 0.5 * 0.8]);
        let short = mix(&s1, &s2, 0.5, 0.3, MixProtocol::Min).unwrap();
        assert_eq!(short.len(), 2);
    }

    #[test]
    fn mismatched_rates_fail() {
        let a = Waveform::new(vec![0.0f64; 4], 8000).unwrap();
        let b = Waveform::new(vec![0.0f64; 4], 16000).unwrap();
        assert!(matches!(mix(&a, &b, 0.5, 0.5, MixProtocol::Max), Err(Error::SampleRateMismatch(..))));
    }
}
