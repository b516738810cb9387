//! Extraction, detection, localization and embedding metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{MixtureSample, SynthWorld};
use crate::detector::{detect, frames_to_ms, DetectionResult, Scoring};
use crate::error::{Error, Result};
use crate::pipeline::{infer, Models};
use crate::scalar::Scalar;
use crate::signal::{si_snr, MixProtocol, Waveform};

/// A sample counts as extracted when its SI-SNRi exceeds this many dB.
pub const ACCURACY_THRESHOLD_DB: f64 = 1.0;

/// `si_snr(target, estimate) - si_snr(target, mixture)`.
pub fn si_snri<T: Scalar>(target: &Waveform<T>, mixture: &Waveform<T>, estimate: &Waveform<T>) -> Result<f64> {
    Ok(si_snr(target, estimate)? - si_snr(target, mixture)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionScore {
    pub mean_si_snri: f64,
    /// Percentage of samples above [`ACCURACY_THRESHOLD_DB`].
    pub accuracy: f64,
    pub per_sample: Vec<f64>,
}

pub fn accuracy_of(improvements: &[f64]) -> f64 {
    let hits = improvements.iter().filter(|&&d| d > ACCURACY_THRESHOLD_DB).count();
    100.0 * hits as f64 / improvements.len() as f64
}

/// SI-SNRi statistics over positive samples and their estimates.
pub fn si_snri_and_accuracy<T: Scalar>(samples: &[MixtureSample<T>], outputs: &[Waveform<T>]) -> Result<ExtractionScore> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    if samples.len() != outputs.len() {
        return Err(Error::LengthMismatch(samples.len(), outputs.len()));
    }
    let per_sample = samples
        .iter()
        .zip(outputs)
        .map(|(s, y)| {
            if !s.keyword_present {
                return Err(Error::invalid("extraction metrics need positive samples"));
            }
            si_snri(&s.target, &s.mixture, y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtractionScore {
        mean_si_snri: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        accuracy: accuracy_of(&per_sample),
        per_sample,
    })
}

/// Confusion counts with derived percentages. Precision is absent when
/// nothing was predicted positive, recall when nothing was positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn detection_metrics(predicted: &[bool], truth: &[bool]) -> Result<DetectionScore> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch(predicted.len(), truth.len()));
    }
    let count = |p: bool, t: bool| predicted.iter().zip(truth).filter(|&(&a, &b)| a == p && b == t).count();
    let (tp, fp, fne, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
    let ratio = |num: usize, den: usize| (den > 0).then(|| 100.0 * num as f64 / den as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(DetectionScore {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fne,
        true_negatives: tn,
        precision,
        recall,
        f1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationScore {
    pub mean_start_err_ms: f64,
    pub mean_end_err_ms: f64,
    pub count: usize,
}

/// Mean absolute boundary errors over entries where both a predicted and a
/// true inclusive frame span exist.
pub fn localization_errors(
    predicted: &[Option<(usize, usize)>],
    truth: &[Option<(usize, usize)>],
) -> Result<LocalizationScore> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch(predicted.len(), truth.len()));
    }
    let (mut start, mut end, mut count) = (0.0, 0.0, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        if let (Some(p), Some(t)) = (p, t) {
            start += (frames_to_ms(p.0) - frames_to_ms(t.0)).abs();
            end += (frames_to_ms(p.1) - frames_to_ms(t.1)).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no detected positives to localize"));
    }
    Ok(LocalizationScore {
        mean_start_err_ms: start / count as f64,
        mean_end_err_ms: end / count as f64,
        count,
    })
}

pub fn embedding_cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub same_speaker: f64,
    pub cross_speaker: f64,
}

impl Separation {
    pub fn margin(&self) -> f64 {
        self.same_speaker - self.cross_speaker
    }
}

/// Mean pairwise cosine within and across speaker labels.
pub fn embedding_separation<T: Scalar>(embeddings: &[Vec<T>], speakers: &[usize]) -> Result<Separation> {
    if embeddings.len() != speakers.len() {
        return Err(Error::LengthMismatch(embeddings.len(), speakers.len()));
    }
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let c = embedding_cosine(&embeddings[i], &embeddings[j])?;
            if speakers[i] == speakers[j] {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    if ns == 0 || nc == 0 {
        return Err(Error::invalid("need same- and cross-speaker pairs"));
    }
    Ok(Separation {
        same_speaker: same / ns as f64,
        cross_speaker: cross / nc as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub detection: DetectionScore,
    pub localization: Option<LocalizationScore>,
}

/// Best-path results computed once per sample; thresholds are applied
/// afterwards. `None` marks a keyword longer than the map.
pub fn score_detection_set<T: Scalar>(
    models: &Models<T>,
    samples: &[MixtureSample<T>],
) -> Result<Vec<Option<DetectionResult<T>>>> {
    samples
        .iter()
        .map(|s| {
            let cue = models.analyze(&s.mixture, &s.cue.phoneme_ids)?;
            match detect(&cue.map, T::neg_infinity(), Scoring::Raw) {
                Ok(d) => Ok(Some(d)),
                Err(Error::NoPath { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Detection and localization at a single threshold from cached results.
pub fn threshold_row<T: Scalar>(
    scored: &[Option<DetectionResult<T>>],
    samples: &[MixtureSample<T>],
    threshold: f64,
    scoring: Scoring,
) -> Result<SweepRow> {
    if scored.len() != samples.len() {
        return Err(Error::LengthMismatch(scored.len(), samples.len()));
    }
    let spans: Vec<Option<(usize, usize)>> = scored
        .iter()
        .map(|d| {
            d.as_ref()
                .filter(|d| d.score(scoring) >= T::of(threshold))
                .map(|d| d.span())
        })
        .collect();
    let predicted: Vec<bool> = spans.iter().map(Option::is_some).collect();
    let truth: Vec<bool> = samples.iter().map(|s| s.keyword_present).collect();
    let true_spans: Vec<_> = samples.iter().map(|s| s.true_frames).collect();
    Ok(SweepRow {
        threshold,
        detection: detection_metrics(&predicted, &truth)?,
        localization: localization_errors(&spans, &true_spans).ok(),
    })
}

pub fn sweep_thresholds<T: Scalar>(
    models: &Models<T>,
    samples: &[MixtureSample<T>],
    grid: &[f64],
    scoring: Scoring,
) -> Result<Vec<SweepRow>> {
    if grid.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two thresholds"));
    }
    let scored = score_detection_set(models, samples)?;
    grid.iter()
        .map(|&tau| threshold_row(&scored, samples, tau, scoring))
        .collect()
}

/// Row with the highest F1 (first on ties); `None` if no F1 is defined.
pub fn best_row(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter()
        .filter(|r| r.detection.f1.is_some())
        .fold(None, |best: Option<&SweepRow>, r| match best {
            Some(b) if b.detection.f1 >= r.detection.f1 => Some(b),
            _ => Some(r),
        })
}

/// Evaluation set sizes and decision rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub positives: usize,
    pub detection_samples: usize,
    pub seed: u64,
    pub protocol: MixProtocol,
    pub pool: Vec<usize>,
    pub threshold: f64,
    pub scoring: Scoring,
    pub grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub positives: usize,
    pub detection_samples: usize,
    pub mean_si_snri: f64,
    pub accuracy: f64,
    pub threshold: f64,
    pub scoring: Scoring,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub mean_start_err_ms: Option<f64>,
    pub mean_end_err_ms: Option<f64>,
    /// Cosine between cue embeddings of positives, grouped by target speaker.
    pub embedding_cosine: Separation,
    pub negatives: usize,
    pub negatives_rejected: usize,
    /// Rejected negatives whose output was exactly zero.
    pub negatives_silent: usize,
    pub sweep: Vec<SweepRow>,
}

impl EvalReport {
    pub fn best_f1(&self) -> Option<f64> {
        best_row(&self.sweep).and_then(|r| r.detection.f1)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, "positives          {}", self.positives);
        let _ = writeln!(s, "detection samples  {}", self.detection_samples);
        let _ = writeln!(s, "SI-SNRi (dB)       {:.2}", self.mean_si_snri);
        let _ = writeln!(s, "accuracy (%)       {:.2}", self.accuracy);
        let _ = writeln!(
            s,
            "tau {:.2} {:?}   P {}  R {}  F1 {}",
            self.threshold,
            self.scoring,
            opt(self.precision),
            opt(self.recall),
            opt(self.f1)
        );
        let _ = writeln!(
            s,
            "S err / E err (ms) {} / {}",
            opt(self.mean_start_err_ms),
            opt(self.mean_end_err_ms)
        );
        let _ = writeln!(
            s,
            "cosine same/cross  {:.3} / {:.3}",
            self.embedding_cosine.same_speaker, self.embedding_cosine.cross_speaker
        );
        let _ = writeln!(
            s,
            "negatives          {} rejected of {}, {} silent",
            self.negatives_rejected, self.negatives, self.negatives_silent
        );
        s.push_str(&sweep_table(&self.sweep));
        s
    }
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("  tau     Pre.    Rec.      F1   S Err.   E Err.\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    for r in rows {
        let (se, ee) = r
            .localization
            .map_or((None, None), |l| (Some(l.mean_start_err_ms), Some(l.mean_end_err_ms)));
        let _ = writeln!(
            s,
            "{:5.2} {:>8} {:>7} {:>7} {:>8} {:>8}",
            r.threshold,
            opt(r.detection.precision),
            opt(r.detection.recall),
            opt(r.detection.f1),
            opt(se),
            opt(ee)
        );
    }
    s
}

/// Full evaluation of trained models on freshly generated held-out sets.
///
/// Extraction quality is measured with the cue embedding applied directly,
/// independent of the detection decision; detection, localization and the
/// silence check run the complete inference path.
pub fn evaluate<T: Scalar>(models: &Models<T>, world: &SynthWorld, plan: &EvalPlan) -> Result<EvalReport> {
    let positives: Vec<MixtureSample<T>> =
        world.make_positive_set(plan.positives, plan.seed, plan.protocol, &plan.pool)?;
    let mut outputs = Vec::with_capacity(positives.len());
    let mut embeddings = Vec::with_capacity(positives.len());
    for s in &positives {
        let cue = models.analyze(&s.mixture, &s.cue.phoneme_ids)?;
        outputs.push(models.extractor.extract(&models.tse_params, &s.mixture, &cue.embedding)?);
        embeddings.push(cue.embedding.data().to_vec());
    }
    let extraction = si_snri_and_accuracy(&positives, &outputs)?;
    let speakers: Vec<usize> = positives.iter().map(|s| s.target_speaker).collect();
    let separation = embedding_separation(&embeddings, &speakers)?;

    let detection_set: Vec<MixtureSample<T>> =
        world.make_eval_set(plan.detection_samples, plan.seed.wrapping_add(1), plan.protocol, &plan.pool)?;
    let scored = score_detection_set(models, &detection_set)?;
    let sweep = plan
        .grid
        .iter()
        .map(|&tau| threshold_row(&scored, &detection_set, tau, plan.scoring))
        .collect::<Result<Vec<_>>>()?;
    let at_tau = threshold_row(&scored, &detection_set, plan.threshold, plan.scoring)?;

    let (mut negatives, mut rejected, mut silent) = (0, 0, 0);
    for s in detection_set.iter().filter(|s| !s.keyword_present) {
        negatives += 1;
        let out = infer(models, &s.mixture, &s.cue.phoneme_ids, plan.threshold, plan.scoring)?;
        if !out.detected() {
            rejected += 1;
            if out.output.is_silent() && out.output.len() == s.mixture.len() {
                silent += 1;
            }
        }
    }

    Ok(EvalReport {
        positives: positives.len(),
        detection_samples: detection_set.len(),
        mean_si_snri: extraction.mean_si_snri,
        accuracy: extraction.accuracy,
        threshold: plan.threshold,
        scoring: plan.scoring,
        precision: at_tau.detection.precision,
        recall: at_tau.detection.recall,
        f1: at_tau.detection.f1,
        mean_start_err_ms: at_tau.localization.map(|l| l.mean_start_err_ms),
        mean_end_err_ms: at_tau.localization.map(|l| l.mean_end_err_ms),
        embedding_cosine: separation,
        negatives,
        negatives_rejected: rejected,
        negatives_silent: silent,
        sweep,
    })
}
