//! Band-split recurrent masking backbone conditioned on a speaker embedding.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gru, Array, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, layer_norm, linear};
use crate::scalar::Scalar;
use crate::signal::{istft_on_tape, stft, ComplexSpectrogram, StftConfig, Waveform};

/// Partition of the frequency bins into contiguous sub-bands.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSpec {
    pub widths: Vec<usize>,
}

impl BandSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid("band widths must be nonempty and positive"));
        }
        Ok(Self { widths })
    }

    /// `count` bands of `bins / count` bins; the last band takes the remainder.
    pub fn uniform(bins: usize, count: usize) -> Result<Self> {
        if count == 0 || count > bins {
            return Err(Error::invalid(format!("cannot split {bins} bins into {count} bands")));
        }
        let base = bins / count;
        let mut widths = vec![base; count];
        widths[count - 1] += bins - base * count;
        Self::new(widths)
    }

    pub fn count(&self) -> usize {
        self.widths.len()
    }

    pub fn bins(&self) -> usize {
        self.widths.iter().sum()
    }

    /// First bin of every band.
    pub fn offsets(&self) -> Vec<usize> {
        self.widths
            .iter()
            .scan(0, |acc, &w| {
                let start = *acc;
                *acc += w;
                Some(start)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Multiply,
    Concat,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(Fusion::Multiply),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::invalid(format!("unknown fusion {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Per-band latent width.
    pub feature_dim: usize,
    /// Hidden size of each recurrent direction.
    pub hidden: usize,
    pub num_blocks: usize,
    pub fusion: Fusion,
    pub bands: BandSpec,
    pub embedding_dim: usize,
    pub stft: StftConfig,
}

impl BackboneConfig {
    pub fn with_uniform_bands(stft: StftConfig, band_count: usize, embedding_dim: usize) -> Result<Self> {
        Ok(Self {
            feature_dim: 32,
            hidden: 32,
            num_blocks: 2,
            fusion: Fusion::Multiply,
            bands: BandSpec::uniform(stft.bins(), band_count)?,
            embedding_dim,
            stft,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let err = |key: &str, message: String| Err(Error::Config { key: format!("backbone.{key}"), message });
        if self.num_blocks == 0 {
            return err("num_blocks", "must be at least 1".into());
        }
        if self.feature_dim == 0 || self.hidden == 0 || self.embedding_dim == 0 {
            return err("feature_dim", "widths must be positive".into());
        }
        if self.bands.bins() != self.stft.bins() {
            return err(
                "bands",
                format!("band widths cover {} bins, spectrogram has {}", self.bands.bins(), self.stft.bins()),
            );
        }
        Ok(())
    }
}

/// Band-split masking network. Parameters live under `tse.` in a store.
#[derive(Clone, Debug)]
pub struct Extractor {
    config: BackboneConfig,
}

fn init_gru<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, input: usize, hidden: usize) {
    store.init_matrix(&format!("{prefix}.w_ih"), input, 3 * hidden);
    store.init_matrix(&format!("{prefix}.w_hh"), hidden, 3 * hidden);
    store.init_zeros(&format!("{prefix}.b_ih"), &[3 * hidden]);
    store.init_zeros(&format!("{prefix}.b_hh"), &[3 * hidden]);
}

fn run_gru<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    seq_axis: usize,
    reverse: bool,
) -> Result<Var> {
    let p = |n: &str| format!("{prefix}.{n}");
    let w_ih = tape.param(store, &p("w_ih"))?;
    let w_hh = tape.param(store, &p("w_hh"))?;
    let b_ih = tape.param(store, &p("b_ih"))?;
    let b_hh = tape.param(store, &p("b_hh"))?;
    gru(tape, x, w_ih, w_hh, b_ih, b_hh, seq_axis, reverse)
}

impl Extractor {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = &self.config;
        let fd = c.feature_dim;
        for (s, &w) in c.bands.widths.iter().enumerate() {
            nn::init_layer_norm(store, &format!("tse.split.{s}.ln"), 2 * w);
            nn::init_linear(store, &format!("tse.split.{s}.proj"), 2 * w, fd, true);
        }
        nn::init_linear(store, "tse.fusion.proj", c.embedding_dim, fd, true);
        if c.fusion == Fusion::Concat {
            nn::init_linear(store, "tse.fusion.merge", 2 * fd, fd, true);
        }
        for b in 0..c.num_blocks {
            for axis in ["time", "band"] {
                let p = format!("tse.block.{b}.{axis}");
                nn::init_layer_norm(store, &format!("{p}.ln"), fd);
                init_gru(store, &format!("{p}.fwd"), fd, c.hidden);
                init_gru(store, &format!("{p}.bwd"), fd, c.hidden);
                nn::init_linear(store, &format!("{p}.proj"), 2 * c.hidden, fd, true);
            }
        }
        for (s, &w) in c.bands.widths.iter().enumerate() {
            let p = format!("tse.mask.{s}");
            nn::init_layer_norm(store, &format!("{p}.ln"), fd);
            nn::init_linear(store, &format!("{p}.fc1"), fd, 2 * fd, true);
            // the mask starts as the identity: zero weights, real part 1
            store.init_zeros(&format!("{p}.fc2.weight"), &[2 * fd, 2 * w]);
            let bias = (0..2 * w).map(|i| if i < w { T::one() } else { T::zero() }).collect();
            store.insert(&format!("{p}.fc2.bias"), Array::from_vec(bias));
        }
    }

    /// Per-band normalized projections stacked to `[K, T, feature_dim]`.
    pub fn band_split<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        spec: &ComplexSpectrogram<T>,
    ) -> Result<Var> {
        let c = &self.config;
        if spec.bins() != c.bands.bins() {
            return Err(Error::shape("band_split", c.bands.bins(), spec.bins()));
        }
        let frames = spec.frames();
        let re = tape.input(spec.re.clone());
        let im = tape.input(spec.im.clone());
        let mut bands = Vec::with_capacity(c.bands.count());
        for (s, (&w, off)) in c.bands.widths.iter().zip(c.bands.offsets()).enumerate() {
            let r = tape.slice(re, 0, off, w)?;
            let i = tape.slice(im, 0, off, w)?;
            let ri = tape.concat(&[r, i], 0)?;
            let x = tape.transpose(ri)?;
            let x = layer_norm(tape, store, &format!("tse.split.{s}.ln"), x)?;
            let x = linear(tape, store, &format!("tse.split.{s}.proj"), x)?;
            bands.push(tape.reshape(x, &[1, frames, c.feature_dim])?);
        }
        tape.concat(&bands, 0)
    }

    /// Conditions `[K, T, fd]` latents on a `[D]` speaker embedding.
    pub fn fuse_speaker<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        latents: Var,
        embedding: Var,
    ) -> Result<Var> {
        let c = &self.config;
        if tape.shape(embedding) != [c.embedding_dim] {
            return Err(Error::shape("fuse_speaker", [c.embedding_dim], tape.shape(embedding)));
        }
        let e = tape.reshape(embedding, &[1, c.embedding_dim])?;
        let e = linear(tape, store, "tse.fusion.proj", e)?;
        let e = tape.reshape(e, &[c.feature_dim])?;
        match c.fusion {
            Fusion::Multiply => tape.mul_row(latents, e),
            Fusion::Concat => {
                let shape = tape.shape(latents).to_vec();
                let ones = tape.input(Array::ones(&[shape[0] * shape[1], 1]));
                let e_row = tape.reshape(e, &[1, c.feature_dim])?;
                let tiled = tape.matmul(ones, e_row)?;
                let tiled = tape.reshape(tiled, &shape)?;
                let joined = tape.concat(&[latents, tiled], 2)?;
                linear(tape, store, "tse.fusion.merge", joined)
            }
        }
    }

    fn residual_rnn<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prefix: &str,
        x: Var,
        seq_axis: usize,
    ) -> Result<Var> {
        let h = layer_norm(tape, store, &format!("{prefix}.ln"), x)?;
        let f = run_gru(tape, store, &format!("{prefix}.fwd"), h, seq_axis, false)?;
        let b = run_gru(tape, store, &format!("{prefix}.bwd"), h, seq_axis, true)?;
        let both = tape.concat(&[f, b], 2)?;
        let y = linear(tape, store, &format!("{prefix}.proj"), both)?;
        tape.add(x, y)
    }

    /// Recurrent blocks and per-band heads; returns the `[F, T]` real and
    /// imaginary mask planes.
    pub fn estimate_mask<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, latents: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let mut x = latents;
        for b in 0..c.num_blocks {
            x = self.residual_rnn(tape, store, &format!("tse.block.{b}.time"), x, 1)?;
            x = self.residual_rnn(tape, store, &format!("tse.block.{b}.band"), x, 0)?;
        }
        let frames = tape.shape(x)[1];
        let (mut res, mut ims) = (Vec::new(), Vec::new());
        for (s, &w) in c.bands.widths.iter().enumerate() {
            let p = format!("tse.mask.{s}");
            let band = tape.slice(x, 0, s, 1)?;
            let band = tape.reshape(band, &[frames, c.feature_dim])?;
            let h = layer_norm(tape, store, &format!("{p}.ln"), band)?;
            let h = linear(tape, store, &format!("{p}.fc1"), h)?;
            let h = tape.tanh(h);
            let m = linear(tape, store, &format!("{p}.fc2"), h)?;
            let m = tape.transpose(m)?;
            res.push(tape.slice(m, 0, 0, w)?);
            ims.push(tape.slice(m, 0, w, w)?);
        }
        Ok((tape.concat(&res, 0)?, tape.concat(&ims, 0)?))
    }

    /// Full differentiable path from a spectrogram to the estimated waveform.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        spec: &ComplexSpectrogram<T>,
        embedding: Var,
        out_len: usize,
    ) -> Result<Var> {
        let latents = self.band_split(tape, store, spec)?;
        let fused = self.fuse_speaker(tape, store, latents, embedding)?;
        let (mre, mim) = self.estimate_mask(tape, store, fused)?;
        apply_mask(tape, spec, mre, mim, out_len)
    }

    /// Inference: mask the mixture's spectrogram and resynthesize at its length.
    pub fn extract<T: Scalar>(&self, store: &ParamStore<T>, mixture: &Waveform<T>, embedding: &Array<T>) -> Result<Waveform<T>> {
        let spec = stft(mixture, self.config.stft)?;
        let mut tape = Tape::new();
        let e = tape.input(embedding.clone());
        let y = self.forward(&mut tape, store, &spec, e, mixture.len())?;
        Waveform::new(tape.value(y).data().to_vec(), mixture.sample_rate())
    }
}

/// Complex product of `spec` with a mask on the tape, then inverse STFT.
pub fn apply_mask<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ComplexSpectrogram<T>,
    mask_re: Var,
    mask_im: Var,
    out_len: usize,
) -> Result<Var> {
    let xr = tape.input(spec.re.clone());
    let xi = tape.input(spec.im.clone());
    let a = tape.mul(mask_re, xr)?;
    let b = tape.mul(mask_im, xi)?;
    let yr = tape.sub(a, b)?;
    let c = tape.mul(mask_re, xi)?;
    let d = tape.mul(mask_im, xr)?;
    let yi = tape.add(c, d)?;
    istft_on_tape(tape, yr, yi, spec.config, out_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_bands_absorb_remainder() {
        let b = BandSpec::uniform(257, 8).unwrap();
        assert_eq!(b.widths[..7], [32; 7]);
        assert_eq!(b.widths[7], 33);
        assert_eq!(b.bins(), 257);
        assert_eq!(b.offsets()[1], 32);
        assert!(BandSpec::new(vec![4, 0]).is_err());
    }

    fn toy(widths: Vec<usize>, fusion: Fusion) -> (Extractor, ParamStore<f64>) {
        let stft = StftConfig { window_len: 16, hop: 8 };
        let mut w = widths;
        let total: usize = w.iter().sum();
        if total != stft.bins() {
            *w.last_mut().unwrap() += stft.bins() - total;
        }
        let ex = Extractor::new(BackboneConfig {
            feature_dim: 4,
            hidden: 3,
            num_blocks: 1,
            fusion,
            bands: BandSpec::new(w).unwrap(),
            embedding_dim: 5,
            stft,
        })
        .unwrap();
        let mut store = ParamStore::new(3);
        ex.init_params(&mut store);
        (ex, store)
    }

    #[test]
    fn zero_spectrogram_gives_bias_latents() {
        let (ex, mut store) = toy(vec![4, 5], Fusion::Multiply);
        store.get_mut("tse.split.1.proj.bias").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let spec = ComplexSpectrogram::zeros(ex.config().stft, 3);
        let mut tape = Tape::new();
        let lat = ex.band_split(&mut tape, &store, &spec).unwrap();
        assert_eq!(tape.shape(lat), &[2, 3, 4]);
        let v = tape.value(lat);
        assert!(v.data()[..12].iter().all(|&x| x == 0.0));
        assert_eq!(&v.data()[12..16], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn multiplicative_fusion_identity_and_zero() {
        let (ex, mut store) = toy(vec![9], Fusion::Multiply);
        let mut tape = Tape::new();
        let lat = tape.input(Array::new(vec![1, 2, 4], (0..8).map(|i| i as f64 - 3.0).collect()).unwrap());
        let e = tape.input(Array::zeros(&[5]));
        store.get_mut("tse.fusion.proj.bias").unwrap().data_mut().fill(1.0);
        let same = ex.fuse_speaker(&mut tape, &store, lat, e).unwrap();
        assert_eq!(tape.value(same), tape.value(lat));
        store.get_mut("tse.fusion.proj.bias").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let lat = tape.input(Array::new(vec![1, 2, 4], (0..8).map(|i| i as f64 - 3.0).collect()).unwrap());
        let e = tape.input(Array::zeros(&[5]));
        let zero = ex.fuse_speaker(&mut tape, &store, lat, e).unwrap();
        assert!(tape.value(zero).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_shape_and_embedding_sensitivity() {
        for fusion in [Fusion::Multiply, Fusion::Concat] {
            let (ex, mut store) = toy(vec![4, 5], fusion);
            // the mask head starts at the identity, which ignores the embedding
            for (k, (_, p)) in store.iter_mut().enumerate() {
                for (i, v) in p.data_mut().iter_mut().enumerate() {
                    *v += 0.05 * ((k * 31 + i * 7) as f64).sin();
                }
            }
            let x = Waveform::new((0..40).map(|i| (i as f64 * 0.3).sin()).collect(), 8000).unwrap();
            let spec = stft(&x, ex.config().stft).unwrap();
            let mut tape = Tape::new();
            let masks = |tape: &mut Tape<f64>, e: Vec<f64>| {
                let e = tape.input(Array::from_vec(e));
                let lat = ex.band_split(tape, &store, &spec).unwrap();
                let fused = ex.fuse_speaker(tape, &store, lat, e).unwrap();
                ex.estimate_mask(tape, &store, fused).unwrap()
            };
            let (r1, _) = masks(&mut tape, vec![1.0, 0.0, -1.0, 0.5, 0.2]);
            let (r2, i2) = masks(&mut tape, vec![-0.3, 0.8, 0.1, 0.0, 1.0]);
            assert_eq!(tape.shape(r1), &[9, spec.frames()]);
            assert_eq!(tape.shape(i2), &[9, spec.frames()]);
            assert_ne!(tape.value(r1), tape.value(r2));
        }
    }

    #[test]
    fn fresh_extractor_passes_the_mixture_through() {
        for fusion in [Fusion::Multiply, Fusion::Concat] {
            let (ex, store) = toy(vec![4, 5], fusion);
            let x = Waveform::new((0..64).map(|i| (i as f64 * 0.7).cos()).collect(), 8000).unwrap();
            let e = Array::from_vec(vec![0.3, -1.0, 0.2, 0.9, -0.4]);
            let y = ex.extract(&store, &x, &e).unwrap();
            let err = x.samples().iter().zip(y.samples()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn identity_and_zero_masks() {
        let stft_cfg = StftConfig { window_len: 16, hop: 4 };
        let x = Waveform::new((0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect(), 8000).unwrap();
        let spec = stft(&x, stft_cfg).unwrap();
        let mut tape = Tape::new();
        let ones = tape.input(Array::ones(spec.re.shape()));
        let zeros = tape.input(Array::zeros(spec.re.shape()));
        let y = apply_mask(&mut tape, &spec, ones, zeros, x.len()).unwrap();
        let err = tape.value(y).data().iter().zip(x.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6);
        let silent = apply_mask(&mut tape, &spec, zeros, zeros, x.len()).unwrap();
        assert!(tape.value(silent).data().iter().all(|&v| v == 0.0));
    }
}
