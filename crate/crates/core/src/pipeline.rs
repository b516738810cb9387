//! Two-stage training and detect–attend–extract inference.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, grad_check, Adam, Array, GradCheckReport, Gradients, ParamStore, Tape};
use crate::corpus::{sample_rng, MixtureSample, SynthWorld};
use crate::detector::{detect, DetectionResult, Scoring};
use crate::error::{Error, Result};
use crate::extractor::{BackboneConfig, BandSpec, Extractor, Fusion};
use crate::kce::{Kce, KceConfig, SPEAKER_CLASSIFIER};
use crate::objectives::{extraction_loss, kce_loss, KceLossInputs, LossConfig};
use crate::scalar::Scalar;
use crate::signal::{fbank, stft, FbankConfig, MixProtocol, StftConfig, Waveform};
use crate::textfront::{phonemize, SpanMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Kce,
    Tse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub warmup_epochs: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let section = match self.stage {
            Stage::Kce => "train_kce",
            Stage::Tse => "train_tse",
        };
        let err = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("{section}.{key}"),
                message: message.into(),
            })
        };
        if self.steps_per_epoch == 0 {
            return err("steps_per_epoch", "must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return err("lr_initial", "learning rates must be positive");
        }
        if self.lr_final > self.lr_initial {
            return err("lr_final", "must not exceed lr_initial");
        }
        if !(self.warmup_epochs >= 0.0) {
            return err("warmup_epochs", "must be nonnegative");
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm", "must be positive");
        }
        if !(self.loss.use_ctc || self.loss.use_speaker || self.loss.use_reg) {
            return err("drop_ctc", "at least one loss term must remain");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Learning rate at a (fractional) epoch. The cue encoder warms up
    /// linearly, then holds `lr_initial`; the backbone decays exponentially
    /// from `lr_initial` to `lr_final` over the run.
    pub fn lr_at_epoch(&self, epoch: f64) -> f64 {
        match self.stage {
            Stage::Kce => {
                if self.warmup_epochs > 0.0 && epoch < self.warmup_epochs {
                    self.lr_initial * epoch / self.warmup_epochs
                } else {
                    self.lr_initial
                }
            }
            Stage::Tse => {
                if self.epochs == 0 {
                    return self.lr_initial;
                }
                self.lr_initial * (self.lr_final / self.lr_initial).powf(epoch / self.epochs as f64)
            }
        }
    }

    /// Rate used by optimizer step `step` (0-based). Warm-up counts the step
    /// being taken so the first update is never zero.
    pub fn lr_at_step(&self, step: usize) -> f64 {
        let spe = self.steps_per_epoch as f64;
        match self.stage {
            Stage::Kce => self.lr_at_epoch((step + 1) as f64 / spe),
            Stage::Tse => self.lr_at_epoch(step as f64 / spe),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg: Option<f64>,
    pub grad_norm: f64,
}

/// Receives every step log; returning an error aborts training.
pub type StepSink<'a> = &'a mut dyn FnMut(&StepLog) -> Result<()>;

/// Writes step logs as JSON lines.
pub struct JsonlLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, log: &StepLog) -> Result<()> {
        let line = serde_json::to_string(log)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
}

impl TrainSummary {
    /// Mean loss over the first `n` steps.
    pub fn head_mean(&self, n: usize) -> f64 {
        mean(&self.losses[..n.min(self.losses.len())])
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        f64::NAN
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Source of online training mixtures.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub world: &'a SynthWorld,
    pub pool: &'a [usize],
    pub protocol: MixProtocol,
}

impl TrainData<'_> {
    fn sample<T: Scalar>(&self, seed: u64, index: usize) -> Result<MixtureSample<T>> {
        self.world
            .make_mixture(&mut sample_rng(seed, index as u64), self.protocol, self.pool, SpanMode::Train)
    }
}

/// Averages, checks and clips a batch gradient; returns the pre-clip norm.
fn finish_batch<T: Scalar>(grads: &mut Gradients<T>, batch: usize, clip: f64, step: usize) -> Result<f64> {
    grads.scale(T::one() / T::of(batch as f64));
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            step,
            detail: "gradient".into(),
        });
    }
    let norm = grads.global_norm().as_f64();
    if norm > clip {
        grads.scale(T::of(clip / norm));
    }
    Ok(norm)
}

fn check_loss(step: usize, value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!("{what} = {value}"),
        })
    }
}

/// Optimizes the cue encoder on the joint CTC + speaker objective with
/// online mixtures. `params` must hold every encoder parameter.
pub fn train_kce<T: Scalar>(
    kce: &Kce,
    params: &mut ParamStore<T>,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    fbank_cfg: &FbankConfig,
    sink: StepSink<'_>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut adam = Adam::new();
    let lexicon = data.world.lexicon();
    let mut losses = Vec::with_capacity(cfg.total_steps());
    for step in 0..cfg.total_steps() {
        let lr = cfg.lr_at_step(step);
        let mut grads = Gradients::zeros_like(params);
        let mut sums = [0.0f64; 4];
        for b in 0..cfg.batch_size {
            let sample: MixtureSample<T> = data.sample(cfg.seed, step * cfg.batch_size + b)?;
            let feats = fbank(&sample.mixture, fbank_cfg)?;
            let transcript = phonemize(lexicon, &sample.transcript())?.phoneme_ids;
            let mut tape = Tape::new();
            let out = kce.forward(&mut tape, params, &feats.frames, &sample.cue.phoneme_ids)?;
            let inputs = KceLossInputs {
                ctc_log_probs: out.ctc_log_probs,
                speaker_embedding: out.speaker_embedding,
                layer_weights: out.layer_weights,
                classifier: tape.param(params, SPEAKER_CLASSIFIER)?,
                transcript: &transcript,
                speaker: sample.target_speaker,
            };
            let loss = kce_loss(&mut tape, &inputs, &cfg.loss)?;
            let b = loss.breakdown;
            check_loss(step, b.total.as_f64(), "kce loss")?;
            for (s, v) in sums.iter_mut().zip([b.total, b.ctc, b.speaker_ce, b.reg]) {
                *s += v.as_f64();
            }
            grads.accumulate(&tape.gradients(loss.total, params)?);
        }
        let grad_norm = finish_batch(&mut grads, cfg.batch_size, cfg.clip_norm, step)?;
        adam.update(params, &grads, T::of(lr));
        let n = cfg.batch_size as f64;
        let log = StepLog {
            stage: Stage::Kce,
            step,
            epoch: (step + 1) as f64 / cfg.steps_per_epoch as f64,
            lr,
            loss: sums[0] / n,
            ctc: Some(sums[1] / n),
            speaker_ce: Some(sums[2] / n),
            reg: Some(sums[3] / n),
            grad_norm,
        };
        losses.push(log.loss);
        sink(&log)?;
    }
    Ok(TrainSummary {
        steps: cfg.total_steps(),
        losses,
    })
}

/// Keyword map and speaker embedding of one (mixture, cue) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CueAnalysis<T> {
    /// `[L_kw, T]` final cross-attention map.
    pub map: Array<T>,
    /// `[D]` speaker embedding.
    pub embedding: Array<T>,
}

pub fn analyze_cue<T: Scalar>(
    kce: &Kce,
    params: &ParamStore<T>,
    mixture: &Waveform<T>,
    phonemes: &[usize],
    fbank_cfg: &FbankConfig,
) -> Result<CueAnalysis<T>> {
    let feats = fbank(mixture, fbank_cfg)?;
    if feats.num_frames() == 0 {
        return Err(Error::invalid("mixture is shorter than one feature frame"));
    }
    let mut tape = Tape::new();
    let out = kce.forward(&mut tape, params, &feats.frames, phonemes)?;
    Ok(CueAnalysis {
        map: tape.value(out.attention_final).clone(),
        embedding: tape.value(out.speaker_embedding).clone(),
    })
}

/// Trains the extraction backbone with the cue encoder frozen. Fails if the
/// encoder parameters differ afterwards.
#[allow(clippy::too_many_arguments)]
pub fn train_backbone<T: Scalar>(
    kce: &Kce,
    kce_params: &ParamStore<T>,
    extractor: &Extractor,
    params: &mut ParamStore<T>,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    fbank_cfg: &FbankConfig,
    sink: StepSink<'_>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let frozen = kce_params.fingerprint();
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(cfg.total_steps());
    for step in 0..cfg.total_steps() {
        let lr = cfg.lr_at_step(step);
        let mut grads = Gradients::zeros_like(params);
        let mut total = 0.0;
        for b in 0..cfg.batch_size {
            let sample: MixtureSample<T> = data.sample(cfg.seed, step * cfg.batch_size + b)?;
            let cue = analyze_cue(kce, kce_params, &sample.mixture, &sample.cue.phoneme_ids, fbank_cfg)?;
            let spec = stft(&sample.mixture, extractor.config().stft)?;
            let mut tape = Tape::new();
            let e = tape.input(cue.embedding);
            let y = extractor.forward(&mut tape, params, &spec, e, sample.mixture.len())?;
            let loss = extraction_loss(&mut tape, sample.target.samples(), y)?;
            let value = tape.value(loss).item().as_f64();
            check_loss(step, value, "extraction loss")?;
            total += value;
            grads.accumulate(&tape.gradients(loss, params)?);
        }
        let grad_norm = finish_batch(&mut grads, cfg.batch_size, cfg.clip_norm, step)?;
        adam.update(params, &grads, T::of(lr));
        let log = StepLog {
            stage: Stage::Tse,
            step,
            epoch: (step + 1) as f64 / cfg.steps_per_epoch as f64,
            lr,
            loss: total / cfg.batch_size as f64,
            ctc: None,
            speaker_ce: None,
            reg: None,
            grad_norm,
        };
        losses.push(log.loss);
        sink(&log)?;
    }
    if kce_params.fingerprint() != frozen {
        return Err(Error::invalid("cue encoder parameters changed during backbone training"));
    }
    Ok(TrainSummary {
        steps: cfg.total_steps(),
        losses,
    })
}

/// Cue encoder and backbone with their parameters.
#[derive(Clone, Debug)]
pub struct Models<T> {
    pub kce: Kce,
    pub kce_params: ParamStore<T>,
    pub extractor: Extractor,
    pub tse_params: ParamStore<T>,
    pub fbank: FbankConfig,
}

const KCE_CKPT: &str = "kce.ckpt";
const KCE_CONFIG: &str = "kce.json";
const TSE_CKPT: &str = "tse.ckpt";
const TSE_CONFIG: &str = "backbone.json";

impl<T: Scalar> Models<T> {
    /// Freshly initialized models; both stores share `seed`.
    pub fn init(kce_cfg: KceConfig, backbone: BackboneConfig, seed: u64) -> Result<Self> {
        let kce = Kce::new(kce_cfg)?;
        let extractor = Extractor::new(backbone)?;
        let mut kce_params = ParamStore::new(seed);
        kce.init_params(&mut kce_params);
        let mut tse_params = ParamStore::new(seed);
        extractor.init_params(&mut tse_params);
        Ok(Self {
            kce,
            kce_params,
            extractor,
            tse_params,
            fbank: FbankConfig::default(),
        })
    }

    pub fn save_kce(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.kce_params, &dir.join(KCE_CKPT))?;
        write_json(&dir.join(KCE_CONFIG), self.kce.config())
    }

    pub fn save_tse(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.tse_params, &dir.join(TSE_CKPT))?;
        write_json(&dir.join(TSE_CONFIG), self.extractor.config())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_kce(dir)?;
        self.save_tse(dir)
    }

    /// Loads the cue encoder from `dir`; the backbone too when present.
    pub fn load(dir: &Path, backbone_fallback: BackboneConfig, seed: u64) -> Result<Self> {
        let kce = Kce::new(read_json(&dir.join(KCE_CONFIG))?)?;
        let kce_params = checkpoint::load(&dir.join(KCE_CKPT))?;
        let (extractor, tse_params) = if dir.join(TSE_CKPT).exists() {
            let ex = Extractor::new(read_json(&dir.join(TSE_CONFIG))?)?;
            (ex, checkpoint::load(&dir.join(TSE_CKPT))?)
        } else {
            let ex = Extractor::new(backbone_fallback)?;
            let mut p = ParamStore::new(seed);
            ex.init_params(&mut p);
            (ex, p)
        };
        Ok(Self {
            kce,
            kce_params,
            extractor,
            tse_params,
            fbank: FbankConfig::default(),
        })
    }

    pub fn analyze(&self, mixture: &Waveform<T>, phonemes: &[usize]) -> Result<CueAnalysis<T>> {
        analyze_cue(&self.kce, &self.kce_params, mixture, phonemes, &self.fbank)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub output: Waveform<T>,
    /// `None` when the keyword has more phonemes than the mixture has frames.
    pub detection: Option<DetectionResult<T>>,
}

impl<T: Scalar> Inference<T> {
    pub fn detected(&self) -> bool {
        self.detection.as_ref().is_some_and(|d| d.detected)
    }
}

/// Detect the keyword in the mixture's attention map; if found, extract
/// with the cue's speaker embedding, otherwise return silence.
pub fn infer<T: Scalar>(
    models: &Models<T>,
    mixture: &Waveform<T>,
    phonemes: &[usize],
    threshold: f64,
    scoring: Scoring,
) -> Result<Inference<T>> {
    let cue = models.analyze(mixture, phonemes)?;
    let detection = match detect(&cue.map, T::of(threshold), scoring) {
        Ok(d) => Some(d),
        Err(Error::NoPath { .. }) => None,
        Err(e) => return Err(e),
    };
    let detected = detection.as_ref().is_some_and(|d| d.detected);
    let output = if detected {
        models.extractor.extract(&models.tse_params, mixture, &cue.embedding)?
    } else {
        Waveform::silence(mixture.len(), mixture.sample_rate())
    };
    Ok(Inference { output, detection })
}

/// Finite-difference checks of the cue-encoder objective and the
/// extraction loss on miniature models with jittered parameters.
pub fn gradient_self_check(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |store: &mut ParamStore<f64>| {
        for (_, p) in store.iter_mut() {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    };
    let mut reports = Vec::new();

    let kce = Kce::new(KceConfig {
        layers: 2,
        dim: 8,
        keyword_dim: 4,
        heads: 2,
        ffn_dim: 8,
        keyword_layers: 1,
        inventory_size: 4,
        speaker_count: 3,
        feature_dim: 5,
    })?;
    let mut store = ParamStore::new(seed);
    kce.init_params(&mut store);
    jitter(&mut store);
    let feats = Array::new(vec![7, 5], (0..35).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect())?;
    let transcript = [1usize, 2, 0, 3];
    let report = grad_check(&store, 1e-5, 1e-5, |tape, s| {
        let out = kce.forward(tape, s, &feats, &[2, 0])?;
        let inputs = KceLossInputs {
            ctc_log_probs: out.ctc_log_probs,
            speaker_embedding: out.speaker_embedding,
            layer_weights: out.layer_weights,
            classifier: tape.param(s, SPEAKER_CLASSIFIER)?,
            transcript: &transcript,
            speaker: 1,
        };
        Ok(kce_loss(tape, &inputs, &LossConfig::default())?.total)
    })?;
    reports.push(("cue_encoder_loss".to_string(), report));

    for fusion in [Fusion::Multiply, Fusion::Concat] {
        let ex = Extractor::new(BackboneConfig {
            feature_dim: 4,
            hidden: 3,
            num_blocks: 1,
            fusion,
            bands: BandSpec::new(vec![4, 5])?,
            embedding_dim: 3,
            stft: StftConfig { window_len: 16, hop: 4 },
        })?;
        let mut store = ParamStore::new(seed);
        ex.init_params(&mut store);
        jitter(&mut store);
        store.insert("speaker", Array::from_vec(vec![0.4, -0.7, 0.2]));
        let len = 40;
        let target: Vec<f64> = (0..len).map(|i| (i as f64 * 0.37).sin()).collect();
        let mix: Vec<f64> = target
            .iter()
            .enumerate()
            .map(|(i, t)| 0.6 * t + 0.4 * (i as f64 * 1.3).cos())
            .collect();
        let spec = stft(&Waveform::new(mix, 8000)?, ex.config().stft)?;
        let report = grad_check(&store, 1e-5, 1e-4, |tape, s| {
            let e = tape.param(s, "speaker")?;
            let y = ex.forward(tape, s, &spec, e, len)?;
            extraction_loss(tape, &target, y)
        })?;
        reports.push((format!("extraction_loss_{fusion:?}").to_lowercase(), report));
    }
    Ok(reports)
}
