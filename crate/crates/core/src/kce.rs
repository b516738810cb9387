//! Keyword-guided cue encoder.
//!
//! A small transformer turns the keyword phonemes into latents. The speech
//! encoder alternates self-attention over filterbank frames with
//! cross-attention into those latents. The per-layer outputs feed a CTC head
//! (last layer) and a weighted layer pooling that yields the speaker
//! embedding. The final cross-attention weights, averaged over heads, form
//! the keyword-by-frame map used for detection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, attention, feed_forward, layer_norm, linear};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KceConfig {
    /// Speech-encoder layers.
    pub layers: usize,
    pub dim: usize,
    pub keyword_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub keyword_layers: usize,
    /// Phoneme inventory, blank excluded.
    pub inventory_size: usize,
    pub speaker_count: usize,
    pub feature_dim: usize,
}

impl Default for KceConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            keyword_dim: 32,
            heads: 4,
            ffn_dim: 128,
            keyword_layers: 2,
            inventory_size: 24,
            speaker_count: 8,
            feature_dim: 80,
        }
    }
}

impl KceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("kce.{key}"),
                message: message.to_string(),
            })
        };
        if self.layers == 0 {
            return bad("layers", "must be at least 1");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("heads", "must divide kce.dim");
        }
        if self.inventory_size == 0 || self.speaker_count == 0 || self.feature_dim == 0 {
            return bad("inventory_size", "inventory, speaker count and feature width must be positive");
        }
        if self.keyword_dim == 0 || self.ffn_dim == 0 {
            return bad("keyword_dim", "widths must be positive");
        }
        Ok(())
    }

    /// CTC classes including the trailing blank.
    pub fn ctc_classes(&self) -> usize {
        self.inventory_size + 1
    }

    pub fn blank(&self) -> usize {
        self.inventory_size
    }
}

/// Encoder outputs as tape variables.
pub struct KceOutput {
    /// `[T, D]` output of every speech layer, first to last.
    pub layer_states: Vec<Var>,
    /// `[L_kw, T]` head-averaged cross-attention of every layer.
    pub attention_maps: Vec<Var>,
    /// The last entry of `attention_maps`.
    pub attention_final: Var,
    /// `[D]`.
    pub speaker_embedding: Var,
    /// `[T, V+1]`.
    pub ctc_logits: Var,
    pub ctc_log_probs: Var,
    pub layer_weights: Var,
}

#[derive(Clone, Debug)]
pub struct Kce {
    config: KceConfig,
}

pub const LAYER_WEIGHTS: &str = "kce.layer_weights";
pub const SPEAKER_CLASSIFIER: &str = "kce.speaker_classifier";

impl Kce {
    pub fn new(config: KceConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &KceConfig {
        &self.config
    }

    /// Registers every encoder parameter in `store`.
    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = &self.config;
        store.init_matrix("kce.phoneme_embedding", c.inventory_size, c.keyword_dim);
        nn::init_linear(store, "kce.keyword_proj", c.keyword_dim, c.dim, true);
        for b in 0..c.keyword_layers {
            let p = format!("kce.keyword.{b}");
            nn::init_layer_norm(store, &format!("{p}.ln1"), c.dim);
            nn::init_attention(store, &format!("{p}.self"), c.dim);
            nn::init_layer_norm(store, &format!("{p}.ln2"), c.dim);
            nn::init_feed_forward(store, &format!("{p}.ffn"), c.dim, c.ffn_dim);
        }
        nn::init_layer_norm(store, "kce.keyword.out_ln", c.dim);

        nn::init_layer_norm(store, "kce.input_ln", c.feature_dim);
        nn::init_linear(store, "kce.input_proj", c.feature_dim, c.dim, true);
        for b in 0..c.layers {
            let p = format!("kce.speech.{b}");
            nn::init_layer_norm(store, &format!("{p}.ln1"), c.dim);
            nn::init_attention(store, &format!("{p}.self"), c.dim);
            nn::init_layer_norm(store, &format!("{p}.ln2"), c.dim);
            nn::init_attention(store, &format!("{p}.cross"), c.dim);
            nn::init_layer_norm(store, &format!("{p}.ln3"), c.dim);
            nn::init_feed_forward(store, &format!("{p}.ffn"), c.dim, c.ffn_dim);
        }
        nn::init_layer_norm(store, "kce.ctc_ln", c.dim);
        nn::init_linear(store, "kce.ctc", c.dim, c.ctc_classes(), true);
        let w0 = T::one() / T::of(c.layers as f64).sqrt();
        store.init_full(LAYER_WEIGHTS, &[c.layers], w0);
        store.init_matrix(SPEAKER_CLASSIFIER, c.dim, c.speaker_count);
    }

    /// Keyword latents `[L_kw, D]`.
    pub fn encode_keywords<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, phonemes: &[usize]) -> Result<Var> {
        let c = &self.config;
        if phonemes.is_empty() {
            return Err(Error::invalid("keyword cue has no phonemes"));
        }
        let table = tape.param(store, "kce.phoneme_embedding")?;
        let emb = tape.embedding(table, phonemes)?;
        let emb = tape.scale(emb, T::of(c.keyword_dim as f64).sqrt());
        let pos = tape.input(nn::sinusoidal_positions(phonemes.len(), c.keyword_dim));
        let x = tape.add(emb, pos)?;
        let mut x = linear(tape, store, "kce.keyword_proj", x)?;
        for b in 0..c.keyword_layers {
            let p = format!("kce.keyword.{b}");
            let h = layer_norm(tape, store, &format!("{p}.ln1"), x)?;
            let (a, _) = attention(tape, store, &format!("{p}.self"), h, h, c.heads)?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, store, &format!("{p}.ln2"), x)?;
            let f = feed_forward(tape, store, &format!("{p}.ffn"), h)?;
            x = tape.add(x, f)?;
        }
        layer_norm(tape, store, "kce.keyword.out_ln", x)
    }

    /// Runs the speech encoder on `[T, F]` filterbank frames against keyword
    /// latents `[L_kw, D]`.
    pub fn encode_speech<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &Array<T>,
        keywords: Var,
    ) -> Result<KceOutput> {
        let c = &self.config;
        if features.rank() != 2 || features.dim(1) != c.feature_dim || features.dim(0) == 0 {
            return Err(Error::shape("kce.features", [0, c.feature_dim], features.shape()));
        }
        let (_, kd) = nn::dims2(tape, keywords)?;
        if kd != c.dim {
            return Err(Error::shape("kce.keywords", [0, c.dim], tape.shape(keywords)));
        }
        let frames = features.dim(0);
        let feats = tape.input(features.clone());
        let h = layer_norm(tape, store, "kce.input_ln", feats)?;
        let h = linear(tape, store, "kce.input_proj", h)?;
        let pos = tape.input(nn::sinusoidal_positions(frames, c.dim));
        let mut x = tape.add(h, pos)?;

        let mut layer_states = Vec::with_capacity(c.layers);
        let mut attention_maps = Vec::with_capacity(c.layers);
        for b in 0..c.layers {
            let p = format!("kce.speech.{b}");
            let h = layer_norm(tape, store, &format!("{p}.ln1"), x)?;
            let (a, _) = attention(tape, store, &format!("{p}.self"), h, h, c.heads)?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, store, &format!("{p}.ln2"), x)?;
            let (a, weights) = attention(tape, store, &format!("{p}.cross"), h, keywords, c.heads)?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, store, &format!("{p}.ln3"), x)?;
            let f = feed_forward(tape, store, &format!("{p}.ffn"), h)?;
            x = tape.add(x, f)?;
            layer_states.push(x);
            let heads_mean = tape.mean(weights, 0)?;
            attention_maps.push(tape.transpose(heads_mean)?);
        }
        let attention_final = *attention_maps.last().expect("at least one layer");

        let h = layer_norm(tape, store, "kce.ctc_ln", x)?;
        let ctc_logits = linear(tape, store, "kce.ctc", h)?;
        let ctc_log_probs = tape.log_softmax(ctc_logits, 1)?;

        let layer_weights = tape.param(store, LAYER_WEIGHTS)?;
        let speaker_embedding = speaker_embedding(tape, &layer_states, layer_weights)?;
        Ok(KceOutput {
            layer_states,
            attention_maps,
            attention_final,
            speaker_embedding,
            ctc_logits,
            ctc_log_probs,
            layer_weights,
        })
    }

    /// Keyword encoding followed by the speech encoder.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &Array<T>,
        phonemes: &[usize],
    ) -> Result<KceOutput> {
        let kw = self.encode_keywords(tape, store, phonemes)?;
        self.encode_speech(tape, store, features, kw)
    }
}

/// `mean_t( sum_i w_i * E_i[t] )` over `[T, D]` layer states.
pub fn speaker_embedding<T: Scalar>(tape: &mut Tape<T>, layer_states: &[Var], w: Var) -> Result<Var> {
    if layer_states.is_empty() || tape.shape(w) != [layer_states.len()] {
        return Err(Error::shape("speaker_embedding", [layer_states.len()], tape.shape(w)));
    }
    let mut acc: Option<Var> = None;
    for (i, &state) in layer_states.iter().enumerate() {
        let wi = tape.slice(w, 0, i, 1)?;
        let term = tape.mul_scalar(state, wi)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    tape.mean(acc.expect("nonempty"), 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Kce, ParamStore<f64>) {
        let kce = Kce::new(KceConfig {
            layers: 2,
            dim: 8,
            keyword_dim: 4,
            heads: 2,
            ffn_dim: 16,
            keyword_layers: 2,
            inventory_size: 5,
            speaker_count: 3,
            feature_dim: 6,
        })
        .unwrap();
        let mut store = ParamStore::new(7);
        kce.init_params(&mut store);
        (kce, store)
    }

    fn features(frames: usize) -> Array<f64> {
        Array::new(vec![frames, 6], (0..frames * 6).map(|i| ((i * 37 % 11) as f64) * 0.3 - 1.0).collect()).unwrap()
    }

    #[test]
    fn shapes_and_column_sums() {
        let (kce, store) = tiny();
        let mut tape = Tape::new();
        let kw = kce.encode_keywords(&mut tape, &store, &[2]).unwrap();
        assert_eq!(tape.shape(kw), &[1, 8]);
        let out = kce.forward(&mut tape, &store, &features(5), &[0, 3, 1]).unwrap();
        assert_eq!(out.layer_states.len(), 2);
        assert_eq!(tape.shape(out.layer_states[1]), &[5, 8]);
        assert_eq!(tape.shape(out.attention_final), &[3, 5]);
        assert_eq!(tape.shape(out.ctc_logits), &[5, 6]);
        let m = tape.value(out.attention_final);
        for t in 0..5 {
            let col: f64 = (0..3).map(|k| m.get(&[k, t])).sum();
            assert!((col - 1.0).abs() < 1e-6);
        }
        assert!(tape.value(out.speaker_embedding).all_finite());
    }

    #[test]
    fn keyword_order_matters() {
        let (kce, store) = tiny();
        let mut tape = Tape::new();
        let a = kce.encode_keywords(&mut tape, &store, &[1, 4]).unwrap();
        let b = kce.encode_keywords(&mut tape, &store, &[4, 1]).unwrap();
        let again = kce.encode_keywords(&mut tape, &store, &[1, 4]).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
        assert_eq!(tape.value(a), tape.value(again));
        assert!(kce.encode_keywords(&mut tape, &store, &[5]).is_err());
    }

    #[test]
    fn keyword_latents_steer_the_embedding() {
        let (kce, store) = tiny();
        let mut tape = Tape::new();
        let zero = tape.input(Array::zeros(&[2, 8]));
        let rand = tape.input(Array::new(vec![2, 8], (0..16).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
        let a = kce.encode_speech(&mut tape, &store, &features(4), zero).unwrap();
        let b = kce.encode_speech(&mut tape, &store, &features(4), rand).unwrap();
        assert_ne!(tape.value(a.speaker_embedding), tape.value(b.speaker_embedding));
    }

    #[test]
    fn pooling_is_linear_in_weights() {
        let mut tape = Tape::<f64>::new();
        let s1 = tape.input(Array::full(&[3, 4], 2.0));
        let s2 = tape.input(Array::full(&[3, 4], 4.0));
        let half = tape.input(Array::from_vec(vec![0.5, 0.5]));
        let e = speaker_embedding(&mut tape, &[s1, s2], half).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 3.0));

        let x = tape.input(Array::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap());
        let y = tape.input(Array::new(vec![3, 2], vec![0.5, -1.0, 2.0, 7.0, 1.0, 1.0]).unwrap());
        let onehot = tape.input(Array::from_vec(vec![1.0, 0.0]));
        let e = speaker_embedding(&mut tape, &[x, y], onehot).unwrap();
        assert_eq!(tape.value(e).data(), &[3.0, 5.0]);
        let w = tape.input(Array::from_vec(vec![0.3, -0.8]));
        let w2 = tape.input(Array::from_vec(vec![0.6, -1.6]));
        let e1 = speaker_embedding(&mut tape, &[x, y], w).unwrap();
        let e2 = speaker_embedding(&mut tape, &[x, y], w2).unwrap();
        for (a, b) in tape.value(e1).data().iter().zip(tape.value(e2).data()) {
            assert_eq!(2.0 * a, *b);
        }
        // frame order only enters through the mean
        let xs = tape.input(Array::new(vec![3, 2], vec![5.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let ys = tape.input(Array::new(vec![3, 2], vec![1.0, 1.0, 0.5, -1.0, 2.0, 7.0]).unwrap());
        let e3 = speaker_embedding(&mut tape, &[xs, ys], w).unwrap();
        for (a, b) in tape.value(e1).data().iter().zip(tape.value(e3).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
