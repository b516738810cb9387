//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report prints in order. The toy
//! end-to-end experiment trains both stages twice (the second run checks
//! determinism); set `KEYGUIDE_ACCEPTANCE_SKIP_TOY=1` to skip it during
//! development. Thresholds on learned quality are reported but only fail the
//! process under `KEYGUIDE_ACCEPTANCE_STRICT=1`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use keyguide::autodiff::{grad_check, gru, Array, ParamStore, Tape, Var};
use keyguide::config::{ExperimentConfig, SWEEP_GRID};
use keyguide::detector::{detect, keyword_max_path, Scoring};
use keyguide::experiment::{Experiment, Outcome, REPORT_JSON};
use keyguide::objectives::{ctc_nll, kce_loss, min_ctc_frames, norm_penalty, KceLossInputs, LossBreakdown, LossConfig};
use keyguide::pipeline::gradient_self_check;
use keyguide::signal::{istft, si_snr, stft, StftConfig, Waveform};
use keyguide::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Outcomes {
    failed_required: Vec<&'static str>,
    failed_learned: Vec<&'static str>,
}

impl Outcomes {
    fn record(&mut self, id: &'static str, learned: bool, check: impl FnOnce() -> Check) {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {id}: {detail}"),
            Err(detail) => {
                println!("FAIL {id}: {detail}");
                if learned {
                    self.failed_learned.push(id);
                } else {
                    self.failed_required.push(id);
                }
            }
        }
    }

    fn skip(&self, id: &str, why: &str) {
        println!("SKIP {id}: {why}");
    }
}

// ---------------------------------------------------------------- detector

/// Best sum over monotone paths that enter row 0 once, then stay or step
/// down one row per frame, and end anywhere in the last row.
fn enumerate_best(map: &[Vec<f64>]) -> f64 {
    fn walk(map: &[Vec<f64>], k: usize, t: usize, acc: f64, best: &mut f64) {
        let last = map.len() - 1;
        if k == last && acc > *best {
            *best = acc;
        }
        if t + 1 == map[0].len() {
            return;
        }
        if k > 0 {
            walk(map, k, t + 1, acc + map[k][t + 1], best);
        }
        if k < last {
            walk(map, k + 1, t + 1, acc + map[k + 1][t + 1], best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    for t0 in 0..map[0].len() {
        walk(map, 0, t0, map[0][t0], &mut best);
    }
    best
}

fn random_map(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let k = rng.gen_range(1..=4);
    let t = rng.gen_range(k..=8);
    (0..k).map(|_| (0..t).map(|_| rng.gen::<f64>()).collect()).collect()
}

fn detector_oracle() -> Check {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 0..1000 {
        let map = random_map(&mut rng);
        let r = keyword_max_path(&Array::from_rows(&map).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let oracle = enumerate_best(&map);
        ensure(r.score == oracle, format!("map {n}: dp {} vs enumeration {oracle}", r.score))?;
    }
    let secs = clock.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.2} s"))?;
    Ok(format!("1000 random maps match exhaustive enumeration exactly in {secs:.3} s"))
}

fn detector_examples() -> Check {
    let cases: [(Vec<Vec<f64>>, f64, usize, usize); 3] = [
        (vec![vec![0.1, 0.9, 0.3]], 0.9, 1, 2),
        (
            vec![vec![0.2, 0.1, 0.0], vec![0.0, 0.3, 0.1], vec![0.0, 0.0, 0.4]],
            0.9,
            0,
            2,
        ),
        (vec![vec![0.25; 4]; 2], 1.0, 0, 1),
    ];
    for (map, s, i, j) in &cases {
        let r = keyword_max_path(&Array::from_rows(map).unwrap()).unwrap();
        ensure(
            (r.score, r.start_frame, r.trigger_frame) == (*s, *i, *j),
            format!("{map:?}: got ({}, {}, {})", r.score, r.start_frame, r.trigger_frame),
        )?;
    }
    let r = keyword_max_path(&Array::from_rows(&cases[1].0).unwrap()).unwrap();
    ensure(r.path == [(0, 0), (1, 1), (2, 2)], format!("3x3 path {:?}", r.path))?;
    Ok("K=1, 3x3 and uniform 2x4 cases reproduce (S, i, j) exactly".into())
}

// ---------------------------------------------------------------- ctc

fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Array<f64> {
    let mut data = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|p| (p / z).ln()));
    }
    Array::new(vec![frames, classes], data).unwrap()
}

fn sequences(len: usize, alphabet: usize) -> Vec<Vec<usize>> {
    (0..alphabet.pow(len as u32))
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let c = code % alphabet;
                    code /= alphabet;
                    c
                })
                .collect()
        })
        .collect()
}

fn labels_up_to(max_len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..=max_len).flat_map(|l| sequences(l, vocab)).collect()
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

fn ctc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut feasible, mut infeasible, mut worst) = (0, 0, 0.0f64);
    for vocab in 1..=3 {
        for frames in 1..=6 {
            let lp = random_log_probs(&mut rng, frames, vocab + 1);
            let paths = sequences(frames, vocab + 1);
            for label in labels_up_to(3, vocab) {
                let brute: f64 = paths
                    .iter()
                    .filter(|p| collapse(p, vocab) == label)
                    .map(|p| p.iter().enumerate().map(|(t, &c)| lp.get(&[t, c])).sum::<f64>().exp())
                    .sum();
                match ctc_nll(&lp, &label) {
                    Ok(nll) => {
                        let err = (nll + brute.ln()).abs();
                        worst = worst.max(err);
                        ensure(err < 1e-10, format!("V={vocab} T={frames} y={label:?}: error {err:e}"))?;
                        feasible += 1;
                    }
                    Err(Error::InfeasibleAlignment { .. }) => {
                        ensure(brute == 0.0 && min_ctc_frames(&label) > frames, format!("{label:?} wrongly infeasible"))?;
                        infeasible += 1;
                    }
                    Err(e) => return Err(e.to_string()),
                }
            }
        }
    }
    let mut worst_total = 0.0f64;
    for vocab in 1..=2 {
        for frames in 1..=4 {
            let lp = random_log_probs(&mut rng, frames, vocab + 1);
            let total: f64 = labels_up_to(frames, vocab)
                .iter()
                .filter_map(|y| ctc_nll(&lp, y).ok())
                .map(|nll| (-nll).exp())
                .sum();
            worst_total = worst_total.max((total - 1.0).abs());
        }
    }
    ensure(worst_total < 1e-10, format!("labeling mass off by {worst_total:e}"))?;
    Ok(format!(
        "{feasible} feasible cases within {worst:.1e}, {infeasible} infeasible raise the error, labeling mass within {worst_total:.1e}"
    ))
}

// ---------------------------------------------------------------- gradients

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Primitive {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    positive: bool,
    build: Build,
}

fn prim(name: &'static str, shapes: &[&[usize]], positive: bool, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Primitive {
    Primitive {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive,
        build: Box::new(build),
    }
}

fn primitives() -> Vec<Primitive> {
    let mut v = vec![
        prim("add", &[&[3, 4], &[3, 4]], false, |t, p| t.add(p[0], p[1])),
        prim("sub", &[&[3, 4], &[3, 4]], false, |t, p| t.sub(p[0], p[1])),
        prim("mul", &[&[3, 4], &[3, 4]], false, |t, p| t.mul(p[0], p[1])),
        prim("div", &[&[3, 4], &[3, 4]], true, |t, p| t.div(p[0], p[1])),
        prim("add_row", &[&[2, 3, 4], &[4]], false, |t, p| t.add_row(p[0], p[1])),
        prim("mul_row", &[&[2, 3, 4], &[4]], false, |t, p| t.mul_row(p[0], p[1])),
        prim("add_scalar", &[&[2, 3], &[]], false, |t, p| t.add_scalar(p[0], p[1])),
        prim("mul_scalar", &[&[2, 3], &[]], false, |t, p| t.mul_scalar(p[0], p[1])),
        prim("scale", &[&[5, 3]], false, |t, p| Ok(t.scale(p[0], -1.7))),
        prim("offset", &[&[5, 3]], false, |t, p| Ok(t.offset(p[0], 0.3))),
        prim("exp", &[&[5, 3]], false, |t, p| Ok(t.exp(p[0]))),
        prim("ln", &[&[5, 3]], true, |t, p| Ok(t.ln(p[0]))),
        prim("sqrt", &[&[5, 3]], true, |t, p| Ok(t.sqrt(p[0]))),
        prim("square", &[&[5, 3]], false, |t, p| Ok(t.square(p[0]))),
        prim("tanh", &[&[5, 3]], false, |t, p| Ok(t.tanh(p[0]))),
        prim("sigmoid", &[&[5, 3]], false, |t, p| Ok(t.sigmoid(p[0]))),
        prim("gelu", &[&[5, 3]], false, |t, p| Ok(t.gelu(p[0]))),
        prim("relu", &[&[5, 3]], false, |t, p| Ok(t.relu(p[0]))),
        prim("neg", &[&[5, 3]], false, |t, p| Ok(t.neg(p[0]))),
        prim("permute", &[&[2, 3, 4]], false, |t, p| t.permute(p[0], &[2, 0, 1])),
        prim("reshape", &[&[2, 6]], false, |t, p| t.reshape(p[0], &[3, 4])),
        prim("concat", &[&[2, 3, 2], &[2, 1, 2]], false, |t, p| t.concat(&[p[0], p[1], p[0]], 1)),
        prim("slice", &[&[3, 5, 2]], false, |t, p| t.slice(p[0], 1, 1, 3)),
        prim("sum", &[&[4, 2]], false, |t, p| {
            let s = t.sum(p[0]);
            Ok(t.square(s))
        }),
        prim("layer_norm", &[&[3, 6], &[6], &[6]], false, |t, p| t.layer_norm(p[0], p[1], p[2], 1e-5)),
        prim("embedding", &[&[5, 3]], false, |t, p| t.embedding(p[0], &[4, 0, 4, 2])),
    ];
    for axis in 0..3 {
        v.push(prim("softmax", &[&[2, 3, 4]], false, move |t, p| t.softmax(p[0], axis)));
        v.push(prim("log_softmax", &[&[2, 3, 4]], false, move |t, p| t.log_softmax(p[0], axis)));
        v.push(prim("mean", &[&[2, 3, 4]], false, move |t, p| t.mean(p[0], axis)));
    }
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        v.push(prim("matmul", &[sa, sb], false, move |t, p| t.matmul_t(p[0], p[1], ta, tb)));
    }
    v.push(prim("matmul_shared", &[&[2, 3, 4], &[4, 5]], false, |t, p| t.matmul(p[0], p[1])));
    for seq_axis in 0..2 {
        for reverse in [false, true] {
            v.push(prim("gru", &[&[3, 4, 2], &[2, 9], &[3, 9], &[9], &[9]], false, move |t, p| {
                gru(t, p[0], p[1], p[2], p[3], p[4], seq_axis, reverse)
            }));
        }
    }
    v
}

fn random_param(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Array<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.3..1.5);
            if positive || rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    if shape.is_empty() {
        Array::scalar(data[0])
    } else {
        Array::new(shape.to_vec(), data).unwrap()
    }
}

fn gradient_suite() -> Check {
    let prims = primitives();
    let mut worst = 0.0f64;
    for (k, p) in prims.iter().enumerate() {
        for trial in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * k as u64 + trial);
            let mut store = ParamStore::<f64>::new(0);
            let names: Vec<String> = (0..p.shapes.len()).map(|i| format!("p{i}")).collect();
            for (name, shape) in names.iter().zip(&p.shapes) {
                store.insert(name, random_param(&mut rng, shape, p.positive));
            }
            let report = grad_check(&store, 1e-5, 1e-5, |t, s| {
                let vars = names.iter().map(|n| t.param(s, n)).collect::<Result<Vec<_>>>()?;
                let y = (p.build)(t, &vars)?;
                let shape = t.shape(y).to_vec();
                let n: usize = shape.iter().product();
                let mut wr = ChaCha8Rng::seed_from_u64(trial ^ 0x5eed);
                let w = Array::new(shape, (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect())?;
                let w = t.input(w);
                let prod = t.mul(y, w)?;
                Ok(t.sum(prod))
            })
            .map_err(|e| format!("{}: {e}", p.name))?;
            worst = worst.max(report.max_error());
            ensure(report.passed, format!("{} trial {trial}: {:.2e}", p.name, report.max_error()))?;
        }
    }
    let mut details = Vec::new();
    for (name, report) in gradient_self_check(7).map_err(|e| e.to_string())? {
        ensure(report.passed, format!("{name}: {:.2e} over tolerance {:.0e}", report.max_error(), report.tolerance))?;
        details.push(format!("{name} {:.1e}", report.max_error()));
    }
    Ok(format!(
        "{} primitive cases below 1e-5 (worst {worst:.1e}); {}",
        prims.len(),
        details.join(", ")
    ))
}

// ---------------------------------------------------------------- signal

fn signal_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let len = rng.gen_range(1000..=20000);
        let x: Waveform<f64> = Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16000).unwrap();
        let y = istft(&stft(&x, StftConfig::default()).unwrap(), len, 16000).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-6, format!("round-trip error {worst:e}"))?;

    let y = Waveform::new((0..400).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap();
    let e = Waveform::new((0..400).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap();
    let base = si_snr(&y, &e).unwrap();
    let mut drift = 0.0f64;
    for a in [-3.0, 0.1, 7.0] {
        for b in [-3.0, 0.1, 7.0] {
            drift = drift.max((si_snr(&y.scaled(b), &e.scaled(a)).unwrap() - base).abs());
        }
    }
    ensure(drift < 1e-9, format!("scale drift {drift:e} dB"))?;

    let r = Waveform::new(vec![1.0, 0.0], 8000).unwrap();
    let est = Waveform::new(vec![1.0, 1.0], 8000).unwrap();
    let v = si_snr(&r, &est).unwrap();
    ensure(v == 0.0, format!("[1,0] vs [1,1] gave {v}"))?;
    Ok(format!("round trip {worst:.1e} on 50 signals; scale drift {drift:.1e} dB; [1,0] vs [1,1] = 0 dB"))
}

// ---------------------------------------------------------------- losses

fn penalty(w: &[f64]) -> f64 {
    let mut store = ParamStore::<f64>::new(0);
    store.insert("w", Array::from_vec(w.to_vec()));
    let mut tape = Tape::new();
    let v = tape.param(&store, "w").unwrap();
    let r = norm_penalty(&mut tape, v);
    tape.value(r).data()[0]
}

fn loss_breakdown(cfg: &LossConfig) -> LossBreakdown<f64> {
    let mut store = ParamStore::<f64>::new(17);
    store.init_matrix("logits", 6, 4);
    store.init_matrix("emb", 1, 5);
    store.init_full("w", &[3], 0.7);
    store.init_matrix("cls", 5, 4);
    let mut tape = Tape::new();
    let x = tape.param(&store, "logits").unwrap();
    let lp = tape.log_softmax(x, 1).unwrap();
    let e = tape.param(&store, "emb").unwrap();
    let e = tape.reshape(e, &[5]).unwrap();
    let inputs = KceLossInputs {
        ctc_log_probs: lp,
        speaker_embedding: e,
        layer_weights: tape.param(&store, "w").unwrap(),
        classifier: tape.param(&store, "cls").unwrap(),
        transcript: &[1, 0, 2],
        speaker: 2,
    };
    kce_loss(&mut tape, &inputs, cfg).unwrap().breakdown
}

fn loss_formulas() -> Check {
    let unit = penalty(&[0.6, 0.8]);
    ensure(unit == 0.0, format!("reg([0.6,0.8]) = {unit:e}"))?;
    let ones = penalty(&[1.0, 1.0]);
    let expected = (2f64.sqrt() - 1.0).powi(2);
    ensure((ones - expected).abs() < 1e-12, format!("reg([1,1]) = {ones}"))?;

    let full = loss_breakdown(&LossConfig::default());
    let composed = full.ctc + 0.5 * (full.speaker_ce + 0.01 * full.reg);
    ensure((full.total - composed).abs() < 1e-12, "total is not L_ctc + 0.5 (CE + 0.01 reg)")?;
    let variants = [
        ("no reg", LossConfig { use_reg: false, ..Default::default() }, full.ctc + 0.5 * full.speaker_ce),
        ("no speaker", LossConfig { use_speaker: false, ..Default::default() }, full.ctc + 0.5 * 0.01 * full.reg),
        ("no ctc", LossConfig { use_ctc: false, ..Default::default() }, 0.5 * (full.speaker_ce + 0.01 * full.reg)),
    ];
    for (name, cfg, expect) in variants {
        let b = loss_breakdown(&cfg);
        ensure((b.total - expect).abs() < 1e-12, format!("{name}: total {} vs {expect}", b.total))?;
        ensure(
            (b.ctc, b.speaker_ce, b.reg) == (full.ctc, full.speaker_ce, full.reg),
            format!("{name} changed a component"),
        )?;
    }
    Ok("reg(0.6,0.8) = 0, reg(1,1) = (sqrt2 - 1)^2, composition and three ablations exact".into())
}

// ---------------------------------------------------------------- toy experiment

fn monotone_recall(recalls: &[(f64, Option<f64>)]) -> std::result::Result<(), String> {
    for w in recalls.windows(2) {
        let (a, b) = (w[0].1.unwrap_or(0.0), w[1].1.unwrap_or(0.0));
        ensure(b <= a, format!("recall rises from {a} at {} to {b} at {}", w[0].0, w[1].0))?;
    }
    Ok(())
}

fn map_recall_sweep() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let maps: Vec<Array<f64>> = (0..400).map(|_| Array::from_rows(&random_map(&mut rng)).unwrap()).collect();
    for scoring in [Scoring::Raw, Scoring::Normalized] {
        let recalls: Vec<(f64, Option<f64>)> = SWEEP_GRID
            .iter()
            .map(|&tau| {
                let hits = maps.iter().filter(|m| detect(m, tau, scoring).unwrap().detected).count();
                (tau, Some(hits as f64 / maps.len() as f64))
            })
            .collect();
        monotone_recall(&recalls)?;
    }
    Ok("recall non-increasing over the grid on 400 random maps".into())
}

fn files_equal(a: &Path, b: &Path, name: &str) -> std::result::Result<(), String> {
    let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
    let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
    ensure(x == y, format!("{name} differs between runs"))
}

fn toy(outcomes: &mut Outcomes) {
    let config = ExperimentConfig::resolve(None, &[]).expect("default configuration");
    let exp = Experiment::new(config).expect("experiment");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let first: Outcome = match exp.run(Some(dirs[0].path())) {
        Ok(o) => o,
        Err(e) => {
            for id in ["7a", "7b", "7c", "7d", "7 budget", "8", "9", "10"] {
                outcomes.record(id, false, || Err(format!("toy run failed: {e}")));
            }
            return;
        }
    };
    let r = &first.report;
    println!(
        "toy run: {} KCE steps, {} backbone steps, {:.0} s",
        first.kce_training.steps, first.tse_training.steps, first.seconds
    );

    outcomes.record("7a", true, || {
        let msg = format!("SI-SNRi {:.2} dB, accuracy {:.1}% on {} positives", r.mean_si_snri, r.accuracy, r.positives);
        ensure(r.positives == 200 && r.mean_si_snri > 5.0 && r.accuracy > 80.0, msg.clone())?;
        Ok(msg)
    });
    outcomes.record("7b", true, || {
        let best = r.best_f1().unwrap_or(0.0);
        let tau = keyguide::eval::best_row(&r.sweep).map_or(f64::NAN, |row| row.threshold);
        let negatives = r.negatives as f64 / r.detection_samples.max(1) as f64;
        let msg = format!(
            "best F1 {best:.1}% at tau {tau:.2} on {} samples ({:.0}% negative)",
            r.detection_samples,
            100.0 * negatives
        );
        ensure(r.detection_samples == 200 && best > 90.0, msg.clone())?;
        Ok(msg)
    });
    outcomes.record("7c", true, || {
        let (s, e) = (r.mean_start_err_ms, r.mean_end_err_ms);
        let ms = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
        let msg = format!("mean start error {} ms, end error {} ms at tau {:.2}", ms(s), ms(e), r.threshold);
        ensure(matches!((s, e), (Some(s), Some(e)) if s < 30.0 && e < 30.0), msg.clone())?;
        Ok(msg)
    });
    outcomes.record("7d", false, || {
        let msg = format!(
            "{} negatives, {} rejected, {} of those exactly silent",
            r.negatives, r.negatives_rejected, r.negatives_silent
        );
        ensure(r.negatives > 0 && r.negatives_silent == r.negatives_rejected, msg.clone())?;
        Ok(msg)
    });
    outcomes.record("7 budget", false, || {
        let steps_ok = first.kce_training.steps <= 3000 && first.tse_training.steps <= 3000;
        let msg = format!(
            "{}+{} steps, {:.1} min",
            first.kce_training.steps,
            first.tse_training.steps,
            first.seconds / 60.0
        );
        ensure(steps_ok && first.seconds < 1800.0, msg.clone())?;
        Ok(msg)
    });
    outcomes.record("8", false, || {
        let recalls: Vec<(f64, Option<f64>)> = r.sweep.iter().map(|row| (row.threshold, row.detection.recall)).collect();
        let grid: Vec<f64> = recalls.iter().map(|x| x.0).collect();
        ensure(grid == SWEEP_GRID, format!("grid {grid:?}"))?;
        monotone_recall(&recalls)?;
        let shown: Vec<String> = recalls.iter().map(|(t, rc)| format!("{t:.2}:{:.2}", rc.unwrap_or(0.0))).collect();
        let synthetic = map_recall_sweep()?;
        Ok(format!("trained model recall {}; {synthetic}", shown.join(" ")))
    });
    outcomes.record("9", false, || {
        let second = exp.run(Some(dirs[1].path())).map_err(|e| e.to_string())?;
        ensure(second.kce_fingerprint == first.kce_fingerprint, "KCE checkpoint differs")?;
        ensure(second.tse_fingerprint == first.tse_fingerprint, "backbone checkpoint differs")?;
        ensure(second.kce_training == first.kce_training && second.tse_training == first.tse_training, "loss curves differ")?;
        ensure(second.report == first.report, "reports differ")?;
        for name in ["kce.ckpt", "tse.ckpt", REPORT_JSON] {
            files_equal(dirs[0].path(), dirs[1].path(), name)?;
        }
        Ok(format!(
            "rerun reproduces checkpoints {:016x}/{:016x}, losses and report bit for bit",
            first.kce_fingerprint, first.tse_fingerprint
        ))
    });
    outcomes.record("10", true, || {
        let s = &r.embedding_cosine;
        let msg = format!(
            "same-speaker cosine {:.3}, cross-speaker {:.3}, margin {:.3}",
            s.same_speaker,
            s.cross_speaker,
            s.margin()
        );
        ensure(s.margin() > 0.1, msg.clone())?;
        Ok(msg)
    });
}

fn main() {
    let mut outcomes = Outcomes {
        failed_required: Vec::new(),
        failed_learned: Vec::new(),
    };
    outcomes.record("1", false, detector_oracle);
    outcomes.record("2", false, detector_examples);
    outcomes.record("3", false, ctc_oracle);
    outcomes.record("4", false, gradient_suite);
    outcomes.record("5", false, signal_suite);
    outcomes.record("6", false, loss_formulas);
    if std::env::var_os("KEYGUIDE_ACCEPTANCE_SKIP_TOY").is_some() {
        for id in ["7a", "7b", "7c", "7d", "7 budget", "9", "10"] {
            outcomes.skip(id, "toy experiment skipped");
        }
        outcomes.record("8", false, map_recall_sweep);
    } else {
        toy(&mut outcomes);
    }

    let strict = std::env::var_os("KEYGUIDE_ACCEPTANCE_STRICT").is_some();
    if !outcomes.failed_learned.is_empty() {
        println!("learned-quality criteria not met: {}", outcomes.failed_learned.join(", "));
    }
    if !outcomes.failed_required.is_empty() || (strict && !outcomes.failed_learned.is_empty()) {
        let mut failed = outcomes.failed_required.clone();
        if strict {
            failed.extend(&outcomes.failed_learned);
        }
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
