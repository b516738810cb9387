use keyguide::corpus::{read_dataset, sample_rng, write_dataset, MixtureSample, SynthSpec, SynthWorld};
use keyguide::signal::MixProtocol;
use keyguide::textfront::SpanMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> SynthWorld {
    SynthWorld::new(SynthSpec::toy()).unwrap()
}

fn pool() -> Vec<usize> {
    (0..8).collect()
}

/// Two-sided Kolmogorov–Smirnov p-value against Uniform(lo, hi), using the
/// asymptotic series with the Stephens small-sample correction.
fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..100).map(|k| 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * lambda * lambda).exp()).sum();
    p.clamp(0.0, 1.0)
}

#[test]
fn gains_are_uniform_and_speakers_distinct() {
    let w = world();
    let mut g = Vec::new();
    for i in 0..1000 {
        let s: MixtureSample<f64> = w.make_mixture(&mut sample_rng(5, i), MixProtocol::Max, &pool(), SpanMode::Train).unwrap();
        assert_ne!(s.target_speaker, s.interferer_speaker);
        for x in [s.gains.0, s.gains.1] {
            assert!((0.1..=0.9).contains(&x));
            g.push(x);
        }
    }
    let p = ks_uniform(g, 0.1, 0.9);
    assert!(p > 0.01, "KS p = {p}");
}

#[test]
fn mixtures_are_linear_in_their_sources() {
    let w = world();
    for protocol in [MixProtocol::Max, MixProtocol::Min] {
        for i in 0..50 {
            let s: MixtureSample<f64> = w.make_mixture(&mut sample_rng(6, i), protocol, &pool(), SpanMode::Train).unwrap();
            let rebuilt: Vec<f64> = s
                .target
                .samples()
                .iter()
                .zip(s.interferer.samples())
                .map(|(a, b)| s.gains.0 * a + s.gains.1 * b)
                .collect();
            assert_eq!(rebuilt.as_slice(), s.mixture.samples());
            assert_eq!(s.mixture.len(), protocol.length(s.source_lengths.0, s.source_lengths.1));
        }
    }
}

#[test]
fn min_protocol_truncates_to_the_shorter_source() {
    let w = world();
    for i in 0..50 {
        let mut rng = sample_rng(7, i);
        let s: MixtureSample<f64> = w.make_mixture(&mut rng, MixProtocol::Min, &pool(), SpanMode::Train).unwrap();
        let (t_len, i_len) = s.source_lengths;
        assert_eq!(s.mixture.len(), t_len.min(i_len));
        // the cue never reaches past the truncation point
        let (_, end) = s.true_frames.unwrap();
        assert!(end * 80 < s.mixture.len());
    }
}

#[test]
fn keyword_frames_match_audible_word_onsets() {
    let w = world();
    for i in 0..40 {
        let s: MixtureSample<f64> = w.make_mixture(&mut sample_rng(8, i), MixProtocol::Max, &pool(), SpanMode::Train).unwrap();
        let x = s.target.samples();
        let span = s.cue.source_span.clone().unwrap();
        let first = &s.target_words[span.start];
        // first clearly audible sample after the preceding silence
        let onset = (first.start_sample.saturating_sub(60)..x.len()).find(|&n| x[n].abs() > 1e-3).unwrap();
        let (start, end) = s.true_frames.unwrap();
        assert!((onset as i64 / 80 - start as i64).abs() <= 1, "onset {onset} frame {start}");
        let last = &s.target_words[span.end - 1];
        let offset = (0..last.end_sample + 60).rev().find(|&n| n < x.len() && x[n].abs() > 1e-3).unwrap();
        assert!((offset as i64 / 80 - end as i64).abs() <= 1, "offset {offset} frame {end}");
    }
}

/// Autocorrelation pitch estimate over lags for 60–400 Hz.
fn pitch(x: &[f64], sr: f64) -> f64 {
    let (lo, hi) = ((sr / 400.0) as usize, (sr / 60.0) as usize);
    let best = (lo..=hi)
        .max_by(|&a, &b| {
            let ac = |lag: usize| x.iter().zip(&x[lag..]).map(|(p, q)| p * q).sum::<f64>();
            ac(a).total_cmp(&ac(b))
        })
        .unwrap();
    sr / best as f64
}

#[test]
fn speakers_differ_in_fundamental() {
    let w = world();
    let words: Vec<String> = w.lexicon().words().take(3).cloned().collect();
    let a = w.synthesize_utterance::<f64, _, _>(0, &words, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = w.synthesize_utterance::<f64, _, _>(7, &words, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_ne!(a.waveform, b.waveform);
    let (pa, pb) = (pitch(a.waveform.samples(), 8000.0), pitch(b.waveform.samples(), 8000.0));
    let want = &w.spec().speakers;
    assert!((pa / want[0].f0_hz - 1.0).abs() < 0.05, "{pa}");
    assert!((pb / want[7].f0_hz - 1.0).abs() < 0.05, "{pb}");
    let again = w.synthesize_utterance::<f64, _, _>(0, &words, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, again);
    assert!(w.synthesize_utterance::<f64, _, _>(0, &["nope"], &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn eval_set_negatives_and_ground_truth() {
    let w = world();
    let set: Vec<MixtureSample<f64>> = w.make_eval_set(100, 77, MixProtocol::Max, &pool()).unwrap();
    let negatives = set.iter().filter(|s| !s.keyword_present).count();
    assert!((40..=60).contains(&negatives));
    assert_eq!(negatives, 58);
    for s in &set {
        assert!((1..=4).contains(&s.cue.words.len()));
        if s.keyword_present {
            let (a, b) = s.true_frames.unwrap();
            assert!(a <= b && b * 80 + 200 <= s.mixture.len());
        } else {
            assert!(s.true_frames.is_none());
            for t in [&s.target_words, &s.interferer_words] {
                let words: Vec<&String> = t.iter().map(|w| &w.word).collect();
                let cue: Vec<&String> = s.cue.words.iter().collect();
                assert!(!words.windows(cue.len()).any(|win| win == cue.as_slice()));
            }
        }
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let w = world();
    let set: Vec<MixtureSample<f64>> = w.make_eval_set(6, 3, MixProtocol::Max, &pool()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &set).unwrap();
    let first = std::fs::read(&manifest).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let again = write_dataset(dir2.path(), &set).unwrap();
    assert_eq!(first, std::fs::read(again).unwrap());
    let back: Vec<MixtureSample<f64>> = read_dataset(&manifest).unwrap();
    assert_eq!(back.len(), 6);
    for (a, b) in set.iter().zip(&back) {
        assert_eq!((a.keyword_present, a.true_frames, &a.cue.words), (b.keyword_present, b.true_frames, &b.cue.words));
        let err = a.mixture.samples().iter().zip(b.mixture.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 32767.0);
    }
}
