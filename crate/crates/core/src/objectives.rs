//! Training losses: CTC, speaker classification with a layer-weight norm
//! penalty, the joint cue-encoder loss and the extraction loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::si_snr_loss;

fn log_add<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frame count able to emit `target`: one frame per label plus a
/// blank between each pair of equal neighbours.
pub fn min_ctc_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct Lattice<T> {
    frames: usize,
    /// Blank-extended label: blank, y1, blank, y2, ..., blank.
    ext: Vec<usize>,
    alpha: Vec<T>,
    beta: Vec<T>,
    log_likelihood: T,
}

impl<T: Scalar> Lattice<T> {
    fn new(log_probs: &Array<T>, target: &[usize]) -> Result<Self> {
        if log_probs.rank() != 2 || log_probs.dim(1) < 2 {
            return Err(Error::shape("ctc", "[T, V+1]", log_probs.shape()));
        }
        let (frames, classes) = (log_probs.dim(0), log_probs.dim(1));
        let blank = classes - 1;
        if let Some(&bad) = target.iter().find(|&&c| c >= blank) {
            return Err(Error::invalid(format!("ctc label {bad} outside [0, {blank})")));
        }
        if min_ctc_frames(target) > frames || frames == 0 {
            return Err(Error::InfeasibleAlignment {
                label_len: target.len(),
                repeats: target.windows(2).filter(|w| w[0] == w[1]).count(),
                frames,
            });
        }
        let mut ext = vec![blank; 2 * target.len() + 1];
        for (i, &c) in target.iter().enumerate() {
            ext[2 * i + 1] = c;
        }
        let s_len = ext.len();
        let lp = |t: usize, s: usize| log_probs.data()[t * classes + ext[s]];
        let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
        let neg = T::neg_infinity();

        let mut alpha = vec![neg; frames * s_len];
        alpha[0] = lp(0, 0);
        if s_len > 1 {
            alpha[1] = lp(0, 1);
        }
        for t in 1..frames {
            for s in 0..s_len {
                let prev = &alpha[(t - 1) * s_len..t * s_len];
                let mut acc = prev[s];
                if s >= 1 {
                    acc = log_add(acc, prev[s - 1]);
                }
                if skip_ok(s) {
                    acc = log_add(acc, prev[s - 2]);
                }
                alpha[t * s_len + s] = if acc == neg { neg } else { acc + lp(t, s) };
            }
        }

        let mut beta = vec![neg; frames * s_len];
        let last = (frames - 1) * s_len;
        beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
        if s_len > 1 {
            beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
        }
        for t in (0..frames - 1).rev() {
            for s in 0..s_len {
                let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
                let mut acc = next[s];
                if s + 1 < s_len {
                    acc = log_add(acc, next[s + 1]);
                }
                if s + 2 < s_len && skip_ok(s + 2) {
                    acc = log_add(acc, next[s + 2]);
                }
                beta[t * s_len + s] = if acc == neg { neg } else { acc + lp(t, s) };
            }
        }

        let end = &alpha[last..];
        let mut ll = end[s_len - 1];
        if s_len > 1 {
            ll = log_add(ll, end[s_len - 2]);
        }
        Ok(Self {
            frames,
            ext,
            alpha,
            beta,
            log_likelihood: ll,
        })
    }

    /// d(-log p) / d log_probs.
    fn gradient(&self, log_probs: &Array<T>) -> Array<T> {
        let classes = log_probs.dim(1);
        let s_len = self.ext.len();
        let mut occupancy = vec![T::neg_infinity(); self.frames * classes];
        for t in 0..self.frames {
            for s in 0..s_len {
                let i = t * s_len + s;
                let cell = &mut occupancy[t * classes + self.ext[s]];
                *cell = log_add(*cell, self.alpha[i] + self.beta[i]);
            }
        }
        let data = occupancy
            .iter()
            .zip(log_probs.data())
            .map(|(&o, &lp)| {
                if o == T::neg_infinity() {
                    T::zero()
                } else {
                    -(o - lp - self.log_likelihood).exp()
                }
            })
            .collect();
        Array::new(log_probs.shape().to_vec(), data).expect("gradient shape")
    }
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `[T, V+1]` whose last column is the blank.
pub fn ctc_nll<T: Scalar>(log_probs: &Array<T>, target: &[usize]) -> Result<T> {
    Ok(-Lattice::new(log_probs, target)?.log_likelihood)
}

struct CtcOp<T> {
    grad: Array<T>,
}

impl<T: Scalar> CustomOp<T> for CtcOp<T> {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(&self, _inputs: &[&Array<T>], _output: &Array<T>, grad: &Array<T>) -> Result<Vec<Option<Array<T>>>> {
        let mut g = self.grad.clone();
        g.scale_assign(grad.item());
        Ok(vec![Some(g)])
    }
}

/// CTC loss recorded on the tape; `log_probs` is `[T, V+1]`, blank last.
pub fn ctc_loss<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, target: &[usize]) -> Result<Var> {
    let lp = tape.value(log_probs);
    let lattice = Lattice::new(lp, target)?;
    let grad = lattice.gradient(lp);
    let out = Array::scalar(-lattice.log_likelihood);
    Ok(tape.custom(Box::new(CtcOp { grad }), &[log_probs], out))
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode<T: Scalar>(log_probs: &Array<T>) -> Vec<usize> {
    let classes = log_probs.dim(1);
    let blank = classes - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.dim(0) {
        let row = log_probs.row(t);
        let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        if best != blank && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Weights and ablation switches of the joint cue-encoder loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub use_ctc: bool,
    pub use_speaker: bool,
    pub use_reg: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.01,
            use_ctc: true,
            use_speaker: true,
            use_reg: true,
        }
    }
}

/// Component values of one joint loss evaluation. Dropped terms are still
/// reported but do not enter `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub ctc: T,
    pub speaker_ce: T,
    pub reg: T,
    pub total: T,
    pub alpha: f64,
    pub beta: f64,
}

pub struct SpeakerLoss {
    pub cross_entropy: Var,
    /// `(|w| - 1)^2`, before scaling by beta.
    pub reg: Var,
}

/// `(|w| - 1)^2` for the layer-pooling weights.
pub fn norm_penalty<T: Scalar>(tape: &mut Tape<T>, w: Var) -> Var {
    let sq = tape.square(w);
    let total = tape.sum(sq);
    let norm = tape.sqrt(total);
    let shifted = tape.offset(norm, -T::one());
    tape.square(shifted)
}

/// Cross-entropy of a bias-free linear classifier on `embedding` plus the
/// layer-weight penalty.
pub fn speaker_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embedding: Var,
    w: Var,
    classifier: Var,
    speaker: usize,
) -> Result<SpeakerLoss> {
    let dim = tape.value(embedding).len();
    let cshape = tape.shape(classifier).to_vec();
    if cshape.len() != 2 || cshape[0] != dim {
        return Err(Error::shape("speaker_loss", [dim, 0], cshape));
    }
    if speaker >= cshape[1] {
        return Err(Error::invalid(format!("speaker class {speaker} outside [0, {})", cshape[1])));
    }
    let row = tape.reshape(embedding, &[1, dim])?;
    let logits = tape.matmul(row, classifier)?;
    let logp = tape.log_softmax(logits, 1)?;
    let pick = tape.slice(logp, 1, speaker, 1)?;
    let picked = tape.sum(pick);
    let cross_entropy = tape.neg(picked);
    let reg = norm_penalty(tape, w);
    Ok(SpeakerLoss { cross_entropy, reg })
}

pub struct KceLoss<T> {
    pub total: Var,
    pub breakdown: LossBreakdown<T>,
}

/// Inputs of the joint loss as recorded on the tape.
pub struct KceLossInputs<'a> {
    /// `[T, V+1]` log-probabilities, blank last.
    pub ctc_log_probs: Var,
    pub speaker_embedding: Var,
    pub layer_weights: Var,
    pub classifier: Var,
    pub transcript: &'a [usize],
    pub speaker: usize,
}

/// `L_ctc + alpha * (CE + beta * reg)`, with each term switchable.
pub fn kce_loss<T: Scalar>(tape: &mut Tape<T>, inputs: &KceLossInputs<'_>, cfg: &LossConfig) -> Result<KceLoss<T>> {
    let ctc = ctc_loss(tape, inputs.ctc_log_probs, inputs.transcript)?;
    let spk = speaker_loss(tape, inputs.speaker_embedding, inputs.layer_weights, inputs.classifier, inputs.speaker)?;

    let mut speaker_terms: Option<Var> = None;
    if cfg.use_speaker {
        speaker_terms = Some(spk.cross_entropy);
    }
    if cfg.use_reg {
        let reg = tape.scale(spk.reg, T::of(cfg.beta));
        speaker_terms = Some(match speaker_terms {
            Some(ce) => tape.add(ce, reg)?,
            None => reg,
        });
    }
    let weighted = speaker_terms.map(|v| tape.scale(v, T::of(cfg.alpha)));
    let total = match (cfg.use_ctc, weighted) {
        (true, Some(s)) => tape.add(ctc, s)?,
        (true, None) => ctc,
        (false, Some(s)) => s,
        (false, None) => return Err(Error::invalid("every loss term is disabled")),
    };
    let breakdown = LossBreakdown {
        ctc: tape.value(ctc).item(),
        speaker_ce: tape.value(spk.cross_entropy).item(),
        reg: tape.value(spk.reg).item(),
        total: tape.value(total).item(),
        alpha: cfg.alpha,
        beta: cfg.beta,
    };
    Ok(KceLoss { total, breakdown })
}

/// Negative SI-SNR between a reference signal and an estimate on the tape.
pub fn extraction_loss<T: Scalar>(tape: &mut Tape<T>, reference: &[T], estimate: Var) -> Result<Var> {
    si_snr_loss(tape, reference, estimate)
}
