//! A parametric speech world and the mixture datasets built from it.
//!
//! Each phoneme is a harmonic complex whose spectral envelope (two formant
//! resonances) identifies the phoneme; the fundamental and a formant scaling
//! factor identify the speaker. Words are runs of fixed-length phonemes joined
//! by raised-cosine cross-fades, separated by short silences.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::wav::{read_wav, write_wav};
use crate::signal::{mix, MixProtocol, Waveform};
use crate::textfront::{phonemize, sample_span, KeywordCue, Lexicon, SpanMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerVoice {
    pub f0_hz: f64,
    pub formant_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub phoneme_count: usize,
    pub lexicon_size: usize,
    pub speakers: Vec<SpeakerVoice>,
    pub phoneme_duration_ms: f64,
    pub word_gap_ms: f64,
    /// Extra silence after each word, drawn uniformly from `[0, gap_jitter_ms]`.
    #[serde(default)]
    pub gap_jitter_ms: f64,
    pub crossfade_ms: f64,
    pub sample_rate: u32,
    /// Leading silence drawn uniformly from `[0, max_lead_ms]`.
    pub max_lead_ms: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Seeds the generated lexicon.
    pub lexicon_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            phoneme_count: 24,
            lexicon_size: 40,
            speakers: spread_voices(8),
            phoneme_duration_ms: 80.0,
            word_gap_ms: 20.0,
            gap_jitter_ms: 0.0,
            crossfade_ms: 20.0,
            sample_rate: 8000,
            max_lead_ms: 100.0,
            min_words: 3,
            max_words: 5,
            lexicon_seed: 0,
        }
    }
}

/// `count` voices with log-spaced fundamentals in 90–250 Hz and alternating
/// formant scaling.
pub fn spread_voices(count: usize) -> Vec<SpeakerVoice> {
    let shifts = [0.92, 1.08, 1.0, 0.96, 1.04];
    (0..count)
        .map(|i| {
            let frac = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
            SpeakerVoice {
                f0_hz: 90.0 * (250.0f64 / 90.0).powf(frac),
                formant_shift: shifts[i % shifts.len()],
            }
        })
        .collect()
}

impl SynthSpec {
    /// The small world used by the end-to-end experiment: 8 speakers and 12
    /// two-phoneme words over 24 phonemes, with short phonemes.
    pub fn toy() -> Self {
        Self {
            lexicon_size: 12,
            phoneme_duration_ms: 30.0,
            crossfade_ms: 10.0,
            max_lead_ms: 100.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("corpus.{key}"),
                message: message.to_string(),
            })
        };
        if self.phoneme_count == 0 || self.phoneme_count > PHONEME_GRID {
            return err("phoneme_count", "must be in 1..=48");
        }
        if self.lexicon_size == 0 {
            return err("lexicon_size", "must be positive");
        }
        if self.speakers.len() < 2 {
            return err("speakers", "at least two speakers are needed for mixtures");
        }
        for (i, a) in self.speakers.iter().enumerate() {
            if !(a.f0_hz > 0.0 && a.formant_shift > 0.0) {
                return err("speakers", "voice parameters must be positive");
            }
            if self.speakers[..i].contains(a) {
                return err("speakers", "voice parameters must be pairwise distinct");
            }
        }
        if !(self.phoneme_duration_ms > 0.0 && self.word_gap_ms >= 0.0 && self.gap_jitter_ms >= 0.0 && self.crossfade_ms >= 0.0) {
            return err("phoneme_duration_ms", "durations must be positive");
        }
        if self.crossfade_ms > self.phoneme_duration_ms {
            return err("crossfade_ms", "cross-fade cannot exceed the phoneme duration");
        }
        if self.sample_rate != 8000 && self.sample_rate != 16000 {
            return err("sample_rate", "must be 8000 or 16000");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return err("min_words", "need 1 <= min_words <= max_words");
        }
        Ok(())
    }

    fn samples(&self, ms: f64) -> usize {
        (ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Samples per 10 ms feature frame.
    pub fn frame_shift(&self) -> usize {
        self.sample_rate as usize / 100
    }
}

const TAIL_MS: f64 = 50.0;

const F1_GRID: [f64; 6] = [300.0, 420.0, 540.0, 660.0, 780.0, 900.0];
const F2_GRID: [f64; 8] = [1000.0, 1250.0, 1500.0, 1750.0, 2000.0, 2250.0, 2500.0, 2750.0];
const PHONEME_GRID: usize = F1_GRID.len() * F2_GRID.len();

/// Formant pair of a phoneme. Consecutive IDs move far apart on the grid.
pub fn phoneme_formants(id: usize) -> (f64, f64) {
    let f1 = F1_GRID[id % F1_GRID.len()];
    let f2 = F2_GRID[(id * 5 + id / F1_GRID.len()) % F2_GRID.len()];
    (f1, f2)
}

/// Builds the synthetic lexicon: when there are enough phonemes each word
/// gets two of its own, otherwise words draw 2–3 phonemes at random with
/// distinct pronunciations.
pub fn generate_lexicon(spec: &SynthSpec) -> Result<Lexicon> {
    let symbols: Vec<String> = (0..spec.phoneme_count).map(|p| format!("p{p:02}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.lexicon_seed);
    let mut prons: Vec<Vec<usize>> = Vec::with_capacity(spec.lexicon_size);
    if 2 * spec.lexicon_size <= spec.phoneme_count {
        let mut ids: Vec<usize> = (0..spec.phoneme_count).collect();
        ids.shuffle(&mut rng);
        prons.extend(ids.chunks(2).take(spec.lexicon_size).map(<[usize]>::to_vec));
    } else {
        let mut attempts = 0;
        while prons.len() < spec.lexicon_size {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::invalid("cannot generate enough distinct pronunciations"));
            }
            let len = rng.gen_range(2..=3);
            let p: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.phoneme_count)).collect();
            if p.windows(2).all(|w| w[0] != w[1]) && !prons.contains(&p) {
                prons.push(p);
            }
        }
    }
    let entries: Vec<(String, Vec<&str>)> = prons
        .iter()
        .enumerate()
        .map(|(i, p)| (word_name(i), p.iter().map(|&id| symbols[id].as_str()).collect()))
        .collect();
    Lexicon::from_entries(entries, Some(symbols.clone()))
}

fn word_name(i: usize) -> String {
    const SYL: [&str; 12] = ["ka", "lo", "mi", "nu", "pe", "ra", "so", "ti", "vu", "we", "yo", "ze"];
    let mut name = String::from(SYL[i % SYL.len()]);
    name.push_str(SYL[(i / SYL.len() + i * 7) % SYL.len()]);
    if i >= SYL.len() {
        name.push_str(&(i / SYL.len()).to_string());
    }
    name
}

/// A word's nominal sample span `[start, end)` within its utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start_sample: usize,
    pub end_sample: usize,
}

impl WordSpan {
    pub fn start_frame(&self, shift: usize) -> usize {
        self.start_sample / shift
    }

    pub fn end_frame(&self, shift: usize) -> usize {
        (self.end_sample.max(1) - 1) / shift
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance<T> {
    pub waveform: Waveform<T>,
    pub words: Vec<WordSpan>,
    pub speaker: usize,
}

impl<T> Utterance<T> {
    pub fn transcript(&self) -> Vec<String> {
        self.words.iter().map(|w| w.word.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample<T> {
    pub mixture: Waveform<T>,
    /// Clean target, padded or truncated to the mixture length.
    pub target: Waveform<T>,
    pub interferer: Waveform<T>,
    pub gains: (f64, f64),
    /// Lengths of the clean target and interferer before mixing.
    pub source_lengths: (usize, usize),
    pub target_words: Vec<WordSpan>,
    pub interferer_words: Vec<WordSpan>,
    pub target_speaker: usize,
    pub interferer_speaker: usize,
    pub cue: KeywordCue,
    pub keyword_present: bool,
    /// Inclusive ground-truth keyword frames (10 ms) for positives.
    pub true_frames: Option<(usize, usize)>,
}

impl<T: Scalar> MixtureSample<T> {
    pub fn transcript(&self) -> Vec<String> {
        self.target_words.iter().map(|w| w.word.clone()).collect()
    }
}

/// Per-index random stream so datasets do not depend on generation order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Lexicon plus synthesis parameters.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    spec: SynthSpec,
    lexicon: Lexicon,
}

impl SynthWorld {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let lexicon = generate_lexicon(&spec)?;
        Ok(Self { spec, lexicon })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn random_transcript<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<String> {
        let words: Vec<&String> = self.lexicon.words().collect();
        let n = rng.gen_range(self.spec.min_words..=self.spec.max_words);
        (0..n).map(|_| words[rng.gen_range(0..words.len())].clone()).collect()
    }

    /// Renders `words` in the voice of `speaker`.
    pub fn synthesize_utterance<T: Scalar, R: Rng + ?Sized, S: AsRef<str>>(
        &self,
        speaker: usize,
        words: &[S],
        rng: &mut R,
    ) -> Result<Utterance<T>> {
        let spec = &self.spec;
        let voice = *spec
            .speakers
            .get(speaker)
            .ok_or_else(|| Error::invalid(format!("speaker {speaker} outside 0..{}", spec.speakers.len())))?;
        if words.is_empty() {
            return Err(Error::invalid("utterance needs at least one word"));
        }
        let prons: Vec<&[usize]> = words
            .iter()
            .map(|w| {
                self.lexicon
                    .pronunciation(w.as_ref())
                    .ok_or_else(|| Error::OutOfVocabulary(w.as_ref().to_string()))
            })
            .collect::<Result<_>>()?;

        let sr = spec.sample_rate as f64;
        let dur = spec.samples(spec.phoneme_duration_ms);
        let xf = spec.samples(spec.crossfade_ms);
        let half = xf / 2;
        let gap = spec.samples(spec.word_gap_ms);
        let lead = spec.samples(rng.gen_range(0.0..=spec.max_lead_ms));
        let f0 = voice.f0_hz * rng.gen_range(0.98..1.02);
        let harmonics = ((0.475 * sr) / f0).floor() as usize;
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

        let mut spans = Vec::with_capacity(words.len());
        let mut cursor = lead + half;
        for (w, p) in words.iter().zip(&prons) {
            let start = cursor;
            let end = start + p.len() * dur;
            spans.push(WordSpan {
                word: w.as_ref().to_string(),
                start_sample: start,
                end_sample: end,
            });
            cursor = end + gap;
            if spec.gap_jitter_ms > 0.0 {
                cursor += spec.samples(rng.gen_range(0.0..=spec.gap_jitter_ms));
            }
        }
        // trailing silence keeps the last word inside complete feature frames
        let total = spans.last().map_or(0, |s| s.end_sample) + half + spec.samples(TAIL_MS);
        let mut out = vec![0.0f64; total];

        for (span, pron) in spans.iter().zip(&prons) {
            for (k, &ph) in pron.iter().enumerate() {
                let (f1, f2) = phoneme_formants(ph);
                let amps: Vec<f64> = (1..=harmonics)
                    .map(|h| envelope(h as f64 * f0, f1 * voice.formant_shift, f2 * voice.formant_shift))
                    .collect();
                let seg_start = span.start_sample + k * dur - half;
                let seg_len = dur + 2 * half;
                for n in 0..seg_len {
                    let idx = seg_start + n;
                    let gain = fade(n, seg_len, xf);
                    if gain == 0.0 {
                        continue;
                    }
                    let t = idx as f64 / sr;
                    let mut v = 0.0;
                    for (h, (&a, &ph0)) in amps.iter().zip(&phases).enumerate() {
                        v += a * (2.0 * PI * (h + 1) as f64 * f0 * t + ph0).sin();
                    }
                    out[idx] += gain * v;
                }
            }
        }
        let rms = (out.iter().map(|x| x * x).sum::<f64>() / out.len() as f64).sqrt();
        let scale = if rms > 0.0 { 0.1 / rms } else { 0.0 };
        let samples = out.iter().map(|&x| T::of(x * scale)).collect();
        Ok(Utterance {
            waveform: Waveform::new(samples, spec.sample_rate)?,
            words: spans,
            speaker,
        })
    }

    /// Draws two distinct speakers from `pool`, random transcripts, gains in
    /// [0.1, 0.9] and a cue cut from the target transcript.
    pub fn make_mixture<T: Scalar, R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        protocol: MixProtocol,
        pool: &[usize],
        mode: SpanMode,
    ) -> Result<MixtureSample<T>> {
        let (target, interferer) = self.pick_pair(rng, pool)?;
        let t_words = self.random_transcript(rng);
        let i_words = self.random_transcript(rng);
        let t_utt: Utterance<T> = self.synthesize_utterance(target, &t_words, rng)?;
        let i_utt: Utterance<T> = self.synthesize_utterance(interferer, &i_words, rng)?;
        let g1 = rng.gen_range(0.1..=0.9);
        let g2 = rng.gen_range(0.1..=0.9);
        let mixture = mix(&t_utt.waveform, &i_utt.waveform, T::of(g1), T::of(g2), protocol)?;
        let len = mixture.len();

        // under truncation only fully audible words may serve as keywords
        let audible = t_utt.words.iter().take_while(|w| w.end_sample <= len).count();
        if audible == 0 {
            return Err(Error::invalid("mixture truncation removed every target word"));
        }
        let span = sample_span(audible, mode, rng)?;
        let mut cue = phonemize(&self.lexicon, &t_words[span.clone()])?;
        cue.source_span = Some(span.clone());
        let shift = self.spec.frame_shift();
        let frames = (
            t_utt.words[span.start].start_frame(shift),
            t_utt.words[span.end - 1].end_frame(shift),
        );
        Ok(MixtureSample {
            source_lengths: (t_utt.waveform.len(), i_utt.waveform.len()),
            target: fit(&t_utt.waveform, len)?,
            interferer: fit(&i_utt.waveform, len)?,
            mixture,
            gains: (g1, g2),
            target_words: t_utt.words,
            interferer_words: i_utt.words,
            target_speaker: target,
            interferer_speaker: interferer,
            cue,
            keyword_present: true,
            true_frames: Some(frames),
        })
    }

    fn pick_pair<R: Rng + ?Sized>(&self, rng: &mut R, pool: &[usize]) -> Result<(usize, usize)> {
        if pool.len() < 2 || pool.iter().any(|&s| s >= self.spec.speakers.len()) {
            return Err(Error::invalid("speaker pool needs two valid speakers"));
        }
        let a = rng.gen_range(0..pool.len());
        let mut b = rng.gen_range(0..pool.len() - 1);
        if b >= a {
            b += 1;
        }
        Ok((pool[a], pool[b]))
    }

    /// Replaces the cue with words spoken by neither speaker.
    pub fn make_negative<T: Scalar, R: Rng + ?Sized>(&self, sample: &mut MixtureSample<T>, rng: &mut R) -> Result<()> {
        let spoken: [Vec<String>; 2] = [
            sample.target_words.iter().map(|w| w.word.clone()).collect(),
            sample.interferer_words.iter().map(|w| w.word.clone()).collect(),
        ];
        for _ in 0..10_000 {
            let fresh = self.random_transcript(rng);
            let span = sample_span(fresh.len(), SpanMode::Eval, rng)?;
            let words = &fresh[span];
            if spoken.iter().any(|t| contains_run(t, words)) {
                continue;
            }
            sample.cue = phonemize(&self.lexicon, words)?;
            sample.keyword_present = false;
            sample.true_frames = None;
            return Ok(());
        }
        Err(Error::invalid("could not draw a negative cue"))
    }

    /// Evaluation mixtures with eval-mode cues; each sample is negative with
    /// probability one half.
    pub fn make_eval_set<T: Scalar>(&self, n: usize, seed: u64, protocol: MixProtocol, pool: &[usize]) -> Result<Vec<MixtureSample<T>>> {
        if n < 2 {
            return Err(Error::invalid("evaluation set needs at least two samples"));
        }
        (0..n)
            .map(|i| {
                let mut rng = sample_rng(seed, i as u64);
                let mut s = self.make_mixture(&mut rng, protocol, pool, SpanMode::Eval)?;
                if rng.gen_bool(0.5) {
                    self.make_negative(&mut s, &mut rng)?;
                }
                Ok(s)
            })
            .collect()
    }

    /// Positive-only evaluation mixtures.
    pub fn make_positive_set<T: Scalar>(&self, n: usize, seed: u64, protocol: MixProtocol, pool: &[usize]) -> Result<Vec<MixtureSample<T>>> {
        (0..n)
            .map(|i| self.make_mixture(&mut sample_rng(seed, i as u64), protocol, pool, SpanMode::Eval))
            .collect()
    }
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn fit<T: Scalar>(w: &Waveform<T>, len: usize) -> Result<Waveform<T>> {
    let mut s = w.samples().to_vec();
    s.resize(len, T::zero());
    Waveform::new(s, w.sample_rate())
}

/// Sum of two resonances plus a small floor so every harmonic is audible.
fn envelope(freq: f64, f1: f64, f2: f64) -> f64 {
    const BW: f64 = 110.0;
    let peak = |f: f64| 1.0 / (1.0 + ((freq - f) / BW).powi(2));
    peak(f1) + 0.7 * peak(f2) + 0.02
}

/// Raised-cosine ramps at both segment edges. Overlapping ramps of adjacent
/// phonemes sum to one.
fn fade(n: usize, len: usize, xf: usize) -> f64 {
    if xf == 0 {
        return 1.0;
    }
    let ramp = |m: usize| {
        let x = (m as f64 + 0.5) / xf as f64;
        (0.5 * PI * x).sin().powi(2)
    };
    if n < xf {
        ramp(n)
    } else if n >= len - xf {
        ramp(len - 1 - n)
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: String,
    pub target: String,
    pub interferer: String,
    pub sample_rate: u32,
    pub gains: (f64, f64),
    pub source_lengths: (usize, usize),
    pub target_words: Vec<WordSpan>,
    pub interferer_words: Vec<WordSpan>,
    pub target_speaker: usize,
    pub interferer_speaker: usize,
    pub cue_words: Vec<String>,
    pub cue_phonemes: Vec<usize>,
    pub keyword_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_start_frame: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_end_frame: Option<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes WAVs under `dir/wav/` and one JSON line per sample.
pub fn write_dataset<T: Scalar>(dir: &Path, samples: &[MixtureSample<T>]) -> Result<PathBuf> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for (i, s) in samples.iter().enumerate() {
        let id = format!("s{i:05}");
        let rel = |kind: &str| format!("wav/{id}_{kind}.wav");
        for (kind, w) in [("mix", &s.mixture), ("target", &s.target), ("interferer", &s.interferer)] {
            write_wav(&dir.join(rel(kind)), w)?;
        }
        let entry = ManifestEntry {
            id: id.clone(),
            mixture: rel("mix"),
            target: rel("target"),
            interferer: rel("interferer"),
            sample_rate: s.mixture.sample_rate(),
            gains: s.gains,
            source_lengths: s.source_lengths,
            target_words: s.target_words.clone(),
            interferer_words: s.interferer_words.clone(),
            target_speaker: s.target_speaker,
            interferer_speaker: s.interferer_speaker,
            cue_words: s.cue.words.clone(),
            cue_phonemes: s.cue.phoneme_ids.clone(),
            keyword_present: s.keyword_present,
            true_start_frame: s.true_frames.map(|f| f.0),
            true_end_frame: s.true_frames.map(|f| f.1),
        };
        writeln!(out, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            entries.push(serde_json::from_str(&line)?);
        }
    }
    Ok(entries)
}

/// Loads every sample of a manifest; WAV paths resolve against its directory.
/// Works for any WAV data laid out this way, synthetic or recorded.
pub fn read_dataset<T: Scalar>(manifest: &Path) -> Result<Vec<MixtureSample<T>>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let load = |rel: &str| read_wav::<T>(&root.join(rel));
            let mixture = load(&e.mixture)?;
            if mixture.sample_rate() != e.sample_rate {
                return Err(Error::SampleRateMismatch(e.sample_rate, mixture.sample_rate()));
            }
            Ok(MixtureSample {
                target: load(&e.target)?,
                interferer: load(&e.interferer)?,
                mixture,
                gains: e.gains,
                source_lengths: e.source_lengths,
                target_words: e.target_words,
                interferer_words: e.interferer_words,
                target_speaker: e.target_speaker,
                interferer_speaker: e.interferer_speaker,
                cue: KeywordCue {
                    words: e.cue_words,
                    phoneme_ids: e.cue_phonemes,
                    source_span: None,
                },
                keyword_present: e.keyword_present,
                true_frames: e.true_start_frame.zip(e.true_end_frame),
            })
        })
        .collect()
}
