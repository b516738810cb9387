//! 16-bit PCM mono WAV I/O. Samples are scaled by 32767 on write (after
//! clamping to [-1, 1]) and divided by 32767 on read.

use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FULL_SCALE: f64 = 32767.0;

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

pub fn write_wav<T: Scalar>(path: &Path, w: &Waveform<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &x in w.samples() {
        let v = (x.as_f64().clamp(-1.0, 1.0) * FULL_SCALE).round() as i16;
        writer.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

pub fn read_wav<T: Scalar>(path: &Path) -> Result<Waveform<T>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM mono, got {spec:?}",
            path.display()
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| T::of(v as f64 / FULL_SCALE)))
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Waveform::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_16_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0f64, 0.5, -0.25, 1.0, -1.0, 1.7], 8000).unwrap();
        write_wav(&path, &w).unwrap();
        let back: Waveform<f64> = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 8000);
        assert_eq!(back.len(), 6);
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a.clamp(-1.0, 1.0) - b).abs() <= 0.5 / FULL_SCALE + 1e-12);
        }
        assert_eq!(back.samples()[3], 1.0);
    }
}
