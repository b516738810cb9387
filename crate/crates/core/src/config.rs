//! Experiment configuration as flat `section.key = value` pairs.
//!
//! Every key of [`ExperimentConfig`] is addressable as `section.key`. A
//! config file holds one pair per line (`#` starts a comment); later
//! assignments win, so command-line overrides are applied after the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{spread_voices, SynthSpec};
use crate::detector::Scoring;
use crate::error::{Error, Result};
use crate::extractor::{BackboneConfig, BandSpec, Fusion};
use crate::kce::KceConfig;
use crate::objectives::LossConfig;
use crate::pipeline::{Stage, TrainConfig};
use crate::signal::{FbankConfig, MixProtocol, StftConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Root of every derived seed.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub phoneme_count: usize,
    pub lexicon_size: usize,
    pub speaker_count: usize,
    pub phoneme_duration_ms: f64,
    pub word_gap_ms: f64,
    pub gap_jitter_ms: f64,
    pub crossfade_ms: f64,
    pub sample_rate: u32,
    pub max_lead_ms: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub protocol: MixProtocol,
    /// Speakers available to cue-encoder training; empty means all.
    pub kce_speakers: Vec<usize>,
    /// Speakers available to backbone training and evaluation; empty means all.
    pub tse_speakers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KceSection {
    pub layers: usize,
    pub dim: usize,
    pub keyword_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub keyword_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_blocks: usize,
    pub fusion: Fusion,
    pub bands: usize,
    pub window: usize,
    pub hop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub warmup_epochs: f64,
    pub clip_norm: f64,
    pub drop_ctc: bool,
    pub drop_speaker: bool,
    pub drop_reg: bool,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub threshold: f64,
    pub scoring: Scoring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub positives: usize,
    pub detection_samples: usize,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub kce: KceSection,
    pub backbone: BackboneSection,
    pub train_kce: TrainSection,
    pub train_tse: TrainSection,
    pub detector: DetectorSection,
    pub eval: EvalSection,
}

/// Threshold grid used by the sweep.
pub const SWEEP_GRID: [f64; 5] = [0.23, 0.30, 0.33, 0.36, 0.48];

impl Default for ExperimentConfig {
    /// The toy end-to-end experiment.
    fn default() -> Self {
        let toy = SynthSpec::toy();
        Self {
            run: RunSection { seed: 2024 },
            corpus: CorpusSection {
                phoneme_count: toy.phoneme_count,
                lexicon_size: toy.lexicon_size,
                speaker_count: toy.speakers.len(),
                phoneme_duration_ms: toy.phoneme_duration_ms,
                word_gap_ms: toy.word_gap_ms,
                gap_jitter_ms: toy.gap_jitter_ms,
                crossfade_ms: toy.crossfade_ms,
                sample_rate: toy.sample_rate,
                max_lead_ms: toy.max_lead_ms,
                min_words: toy.min_words,
                max_words: toy.max_words,
                protocol: MixProtocol::Max,
                kce_speakers: Vec::new(),
                tse_speakers: Vec::new(),
            },
            kce: KceSection {
                layers: 4,
                dim: 64,
                keyword_dim: 32,
                heads: 4,
                ffn_dim: 128,
                keyword_layers: 2,
            },
            backbone: BackboneSection {
                feature_dim: 32,
                hidden: 32,
                num_blocks: 2,
                fusion: Fusion::Multiply,
                bands: 8,
                window: 512,
                hop: 128,
            },
            train_kce: TrainSection {
                epochs: 60,
                steps_per_epoch: 50,
                batch_size: 8,
                lr_initial: 1e-3,
                lr_final: 1e-3,
                warmup_epochs: 3.0,
                clip_norm: 5.0,
                drop_ctc: false,
                drop_speaker: false,
                drop_reg: false,
                alpha: 0.5,
                beta: 0.01,
            },
            train_tse: TrainSection {
                epochs: 60,
                steps_per_epoch: 50,
                batch_size: 4,
                lr_initial: 2e-3,
                lr_final: 5e-5,
                warmup_epochs: 0.0,
                clip_norm: 5.0,
                drop_ctc: false,
                drop_speaker: false,
                drop_reg: false,
                alpha: 0.5,
                beta: 0.01,
            },
            detector: DetectorSection {
                threshold: crate::detector::DEFAULT_THRESHOLD,
                scoring: Scoring::Normalized,
            },
            eval: EvalSection {
                positives: 200,
                detection_samples: 200,
                thresholds: SWEEP_GRID.to_vec(),
            },
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            pairs.extend(parse_pairs(&text)?);
        }
        for o in overrides {
            pairs.push(split_pair(o)?);
        }
        let mut cfg = Self::default();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (key, raw) in pairs {
            let slot = lookup(&mut tree, key)?;
            *slot = coerce(key, slot, raw)?;
            // surfaces bad enum values under the key that introduced them
            serde_json::from_value::<Self>(tree.clone()).map_err(|e| Error::Config {
                key: key.clone(),
                message: e.to_string(),
            })?;
        }
        *self = serde_json::from_value(tree)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        self.kce_config().validate()?;
        self.backbone_config()?.validate()?;
        self.kce_train().validate()?;
        self.tse_train().validate()?;
        let n = self.corpus.speaker_count;
        for (key, pool) in [("corpus.kce_speakers", &self.corpus.kce_speakers), ("corpus.tse_speakers", &self.corpus.tse_speakers)] {
            if pool.iter().any(|&s| s >= n) || pool.len() == 1 {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("need at least two speaker ids below {n}"),
                });
            }
        }
        if !self.detector.threshold.is_finite() {
            return Err(Error::Config {
                key: "detector.threshold".into(),
                message: "must be finite".into(),
            });
        }
        if self.eval.thresholds.len() < 2 {
            return Err(Error::Config {
                key: "eval.thresholds".into(),
                message: "sweep needs at least two thresholds".into(),
            });
        }
        Ok(())
    }

    /// One `section.key = value` line per setting, in schema order.
    pub fn to_pairs_text(&self) -> Result<String> {
        let tree = serde_json::to_value(self)?;
        let mut out = String::new();
        if let Value::Object(sections) = tree {
            for (section, body) in sections {
                if let Value::Object(keys) = body {
                    for (k, v) in keys {
                        let text = match v {
                            Value::String(s) => s,
                            other => other.to_string(),
                        };
                        out.push_str(&format!("{section}.{k} = {text}\n"));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let c = &self.corpus;
        SynthSpec {
            phoneme_count: c.phoneme_count,
            lexicon_size: c.lexicon_size,
            speakers: spread_voices(c.speaker_count),
            phoneme_duration_ms: c.phoneme_duration_ms,
            word_gap_ms: c.word_gap_ms,
            gap_jitter_ms: c.gap_jitter_ms,
            crossfade_ms: c.crossfade_ms,
            sample_rate: c.sample_rate,
            max_lead_ms: c.max_lead_ms,
            min_words: c.min_words,
            max_words: c.max_words,
            lexicon_seed: self.run.seed,
        }
    }

    pub fn kce_config(&self) -> KceConfig {
        let k = &self.kce;
        KceConfig {
            layers: k.layers,
            dim: k.dim,
            keyword_dim: k.keyword_dim,
            heads: k.heads,
            ffn_dim: k.ffn_dim,
            keyword_layers: k.keyword_layers,
            inventory_size: self.corpus.phoneme_count,
            speaker_count: self.corpus.speaker_count,
            feature_dim: FbankConfig::default().num_filters,
        }
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            window_len: self.backbone.window,
            hop: self.backbone.hop,
        }
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let b = &self.backbone;
        let stft = self.stft_config();
        stft.validate().map_err(|e| Error::Config {
            key: "backbone.window".into(),
            message: e.to_string(),
        })?;
        let bands = BandSpec::uniform(stft.bins(), b.bands).map_err(|e| Error::Config {
            key: "backbone.bands".into(),
            message: e.to_string(),
        })?;
        Ok(BackboneConfig {
            feature_dim: b.feature_dim,
            hidden: b.hidden,
            num_blocks: b.num_blocks,
            fusion: b.fusion,
            bands,
            embedding_dim: self.kce.dim,
            stft,
        })
    }

    fn train(&self, stage: Stage) -> TrainConfig {
        let (t, offset) = match stage {
            Stage::Kce => (&self.train_kce, 1),
            Stage::Tse => (&self.train_tse, 2),
        };
        TrainConfig {
            stage,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            batch_size: t.batch_size,
            lr_initial: t.lr_initial,
            lr_final: t.lr_final,
            warmup_epochs: t.warmup_epochs,
            clip_norm: t.clip_norm,
            seed: self.run.seed.wrapping_add(offset),
            loss: LossConfig {
                alpha: t.alpha,
                beta: t.beta,
                use_ctc: !t.drop_ctc,
                use_speaker: !t.drop_speaker,
                use_reg: !t.drop_reg,
            },
        }
    }

    pub fn kce_train(&self) -> TrainConfig {
        self.train(Stage::Kce)
    }

    pub fn tse_train(&self) -> TrainConfig {
        self.train(Stage::Tse)
    }

    pub fn init_seed(&self) -> u64 {
        self.run.seed
    }

    /// Seed of the held-out evaluation streams.
    pub fn eval_seed(&self) -> u64 {
        self.run.seed.wrapping_add(3)
    }

    pub fn kce_pool(&self) -> Vec<usize> {
        pool_or_all(&self.corpus.kce_speakers, self.corpus.speaker_count)
    }

    pub fn tse_pool(&self) -> Vec<usize> {
        pool_or_all(&self.corpus.tse_speakers, self.corpus.speaker_count)
    }
}

fn pool_or_all(pool: &[usize], n: usize) -> Vec<usize> {
    if pool.is_empty() {
        (0..n).collect()
    } else {
        pool.to_vec()
    }
}

/// Parses `section.key = value` lines; blank lines and `#` comments skip.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(split_pair)
        .collect()
}

pub fn split_pair(line: &str) -> Result<(String, String)> {
    let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
        key: line.trim().to_string(),
        message: "expected section.key = value".into(),
    })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Result<&'a mut Value> {
    let unknown = || Error::Config {
        key: key.to_string(),
        message: "unknown key".into(),
    };
    let (section, field) = key.split_once('.').ok_or_else(unknown)?;
    tree.get_mut(section)
        .and_then(|s| s.get_mut(field))
        .ok_or_else(unknown)
}

/// Converts `raw` to the JSON type already held at the key.
fn coerce(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config {
        key: key.to_string(),
        message: format!("expected {what}, got {raw:?}"),
    };
    match current {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad("true or false")),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|_| bad("a nonnegative integer")),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| bad("a finite number"))
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(_) => {
            let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
            let items: Vec<Value> = inner
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| serde_json::from_str::<Value>(s).map_err(|_| bad("a comma-separated list of numbers")))
                .collect::<Result<_>>()?;
            Ok(Value::Array(items))
        }
        Value::Null | Value::Object(_) => Err(bad("a scalar")),
    }
}
