use keyguide::textfront::{phonemize, sample_keywords, sample_span, Lexicon, SpanMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn train_span_lengths_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut counts = [0usize; 7];
    for _ in 0..10_000 {
        let span = sample_span(30, SpanMode::Train, &mut rng).unwrap();
        assert!(span.end <= 30);
        counts[span.len()] += 1;
    }
    assert_eq!(counts[0] + counts[1], 0);
    let expected = 10_000.0 / 5.0;
    let stat: f64 = counts[2..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat} p {p}");
}

#[test]
fn eval_spans_stay_within_four_words() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for n in 1..12 {
        for _ in 0..200 {
            let s = sample_span(n, SpanMode::Eval, &mut rng).unwrap();
            assert!((1..=4).contains(&s.len()) && s.end <= n);
        }
    }
}

#[test]
fn phonemize_distributes_over_concatenation() {
    let lex = Lexicon::parse_tsv("a\tx y\nb\tz\nc\ty x z\n", None).unwrap();
    let words = ["a", "b", "c", "a"];
    for cut in 0..=words.len() {
        let (l, r) = words.split_at(cut);
        let mut joined = if l.is_empty() { vec![] } else { phonemize(&lex, l).unwrap().phoneme_ids };
        if !r.is_empty() {
            joined.extend(phonemize(&lex, r).unwrap().phoneme_ids);
        }
        assert_eq!(joined, phonemize(&lex, &words).unwrap().phoneme_ids);
    }
}

#[test]
fn sampled_cues_are_consecutive_transcript_words() {
    let lex = Lexicon::parse_tsv("a\tx y\nb\tz\nc\ty x z\n", None).unwrap();
    let transcript = ["a", "b", "c", "c", "a", "b", "a"];
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..500 {
        let cue = sample_keywords(&lex, &transcript, SpanMode::Train, &mut rng).unwrap();
        let span = cue.source_span.clone().unwrap();
        assert_eq!(cue.words, transcript[span].to_vec());
    }
}
