use keyguide::autodiff::{grad_check, Array, ParamStore, Tape};
use keyguide::objectives::{ctc_loss, ctc_nll, kce_loss, min_ctc_frames, KceLossInputs, LossConfig};
use keyguide::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Array<f64> {
    let mut data = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|p| (p / z).ln()));
    }
    Array::new(vec![frames, classes], data).unwrap()
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if c != blank && prev != Some(c) {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Every length-`frames` path over `classes` symbols.
fn all_paths(frames: usize, classes: usize) -> Vec<Vec<usize>> {
    let total = classes.pow(frames as u32);
    (0..total)
        .map(|mut code| {
            (0..frames)
                .map(|_| {
                    let c = code % classes;
                    code /= classes;
                    c
                })
                .collect()
        })
        .collect()
}

fn all_labels(max_len: usize, vocab: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for len in 1..=max_len {
        out.extend(all_paths(len, vocab));
    }
    out
}

fn path_prob(lp: &Array<f64>, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &c)| lp.get(&[t, c])).sum::<f64>().exp()
}

#[test]
fn forward_recursion_matches_alignment_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for vocab in 1..=3 {
        for frames in 1..=6 {
            let lp = random_log_probs(&mut rng, frames, vocab + 1);
            let paths = all_paths(frames, vocab + 1);
            for label in all_labels(3, vocab) {
                let brute: f64 = paths.iter().filter(|p| collapse(p, vocab) == label).map(|p| path_prob(&lp, p)).sum();
                match ctc_nll(&lp, &label) {
                    Ok(nll) => {
                        assert!(brute > 0.0);
                        assert!((nll - (-brute.ln())).abs() < 1e-10, "V={vocab} T={frames} y={label:?}");
                        checked += 1;
                    }
                    Err(Error::InfeasibleAlignment { .. }) => {
                        assert!(min_ctc_frames(&label) > frames);
                        assert_eq!(brute, 0.0);
                    }
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
    assert!(checked > 200);
}

#[test]
fn labelings_partition_the_outcome_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for vocab in 1..=2 {
        for frames in 1..=4 {
            let lp = random_log_probs(&mut rng, frames, vocab + 1);
            let total: f64 = all_labels(frames, vocab)
                .iter()
                .filter_map(|y| ctc_nll(&lp, y).ok())
                .map(|nll| (-nll).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "V={vocab} T={frames}: {total}");
        }
    }
}

#[test]
fn ctc_gradient_through_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let mut store = ParamStore::<f64>::new(trial);
        let frames = rng.gen_range(4..9);
        let logits = Array::new(vec![frames, 4], (0..frames * 4).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        store.insert("logits", logits);
        let target = [0usize, 2, 2];
        let report = grad_check(&store, 1e-5, 1e-5, |tape, s| {
            let x = tape.param(s, "logits")?;
            let lp = tape.log_softmax(x, 1)?;
            ctc_loss(tape, lp, &target)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

struct Toy {
    store: ParamStore<f64>,
    transcript: Vec<usize>,
}

fn toy() -> Toy {
    let mut store = ParamStore::new(17);
    store.init_matrix("logits", 6, 4);
    store.init_matrix("emb", 1, 5);
    store.init_full("w", &[3], 0.7);
    store.init_matrix("cls", 5, 4);
    Toy {
        store,
        transcript: vec![1, 0, 2],
    }
}

fn evaluate(t: &Toy, cfg: &LossConfig) -> keyguide::objectives::LossBreakdown<f64> {
    let mut tape = Tape::new();
    let x = tape.param(&t.store, "logits").unwrap();
    let lp = tape.log_softmax(x, 1).unwrap();
    let e = tape.param(&t.store, "emb").unwrap();
    let e = tape.reshape(e, &[5]).unwrap();
    let inputs = KceLossInputs {
        ctc_log_probs: lp,
        speaker_embedding: e,
        layer_weights: tape.param(&t.store, "w").unwrap(),
        classifier: tape.param(&t.store, "cls").unwrap(),
        transcript: &t.transcript,
        speaker: 2,
    };
    kce_loss(&mut tape, &inputs, cfg).unwrap().breakdown
}

#[test]
fn joint_loss_composition_and_ablations() {
    let t = toy();
    let full = evaluate(&t, &LossConfig::default());
    assert!((full.total - (full.ctc + 0.5 * (full.speaker_ce + 0.01 * full.reg))).abs() < 1e-12);
    assert!(full.ctc > 0.0 && full.speaker_ce > 0.0 && full.reg > 0.0);

    let no_reg = evaluate(&t, &LossConfig { use_reg: false, ..Default::default() });
    assert!((no_reg.total - (full.ctc + 0.5 * full.speaker_ce)).abs() < 1e-12);
    let no_spk = evaluate(&t, &LossConfig { use_speaker: false, ..Default::default() });
    assert!((no_spk.total - (full.ctc + 0.5 * 0.01 * full.reg)).abs() < 1e-12);
    let no_ctc = evaluate(&t, &LossConfig { use_ctc: false, ..Default::default() });
    assert!((no_ctc.total - 0.5 * (full.speaker_ce + 0.01 * full.reg)).abs() < 1e-12);
    let alpha0 = evaluate(&t, &LossConfig { alpha: 0.0, ..Default::default() });
    assert_eq!(alpha0.total, full.ctc);
    for b in [no_reg, no_spk, no_ctc, alpha0] {
        assert_eq!((b.ctc, b.speaker_ce, b.reg), (full.ctc, full.speaker_ce, full.reg));
    }
}
