//! Lexicon-based phonemization and keyword-span sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word → phoneme-ID pronunciations over a fixed phoneme inventory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    symbols: Vec<String>,
    entries: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    symbols: Vec<String>,
}

impl Lexicon {
    /// Builds a lexicon from symbolic pronunciations; phoneme IDs follow the
    /// order in which symbols first appear, unless `symbols` pins them.
    pub fn from_entries<I, W, P>(entries: I, symbols: Option<Vec<String>>) -> Result<Self>
    where
        I: IntoIterator<Item = (W, Vec<P>)>,
        W: Into<String>,
        P: AsRef<str>,
    {
        let mut symbols = symbols.unwrap_or_default();
        let mut ids: HashMap<String, usize> = symbols.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let mut map = BTreeMap::new();
        for (word, pron) in entries {
            let word = word.into();
            if pron.is_empty() {
                return Err(Error::Format(format!("empty pronunciation for {word:?}")));
            }
            let pron = pron
                .iter()
                .map(|p| {
                    let p = p.as_ref();
                    *ids.entry(p.to_string()).or_insert_with(|| {
                        symbols.push(p.to_string());
                        symbols.len() - 1
                    })
                })
                .collect();
            map.insert(word, pron);
        }
        Ok(Self { symbols, entries: map })
    }

    /// Parses `word<TAB>p1 p2 ...` rows.
    pub fn parse_tsv(text: &str, symbols: Option<Vec<String>>) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, pron) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("lexicon line {}: missing tab", n + 1)))?;
            rows.push((word.trim().to_string(), pron.split_whitespace().map(str::to_string).collect::<Vec<_>>()));
        }
        Self::from_entries(rows, symbols)
    }

    /// Loads a TSV lexicon; when `<path>.symbols.json` exists its symbol order
    /// fixes the phoneme IDs.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let symbols = if sidecar.exists() {
            let s = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            Some(serde_json::from_str::<Sidecar>(&s)?.symbols)
        } else {
            None
        };
        Self::parse_tsv(&text, symbols)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&Sidecar {
            symbols: self.symbols.clone(),
        })?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(w, p)| {
                let pron: Vec<&str> = p.iter().map(|&i| self.symbols[i].as_str()).collect();
                format!("{w}\t{}\n", pron.join(" "))
            })
            .collect()
    }

    /// Number of distinct phonemes (the CTC blank is not included).
    pub fn inventory_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn pronunciation(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".symbols.json");
    path.with_file_name(name)
}

/// Keyword prompt: consecutive words and their concatenated phonemes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordCue {
    pub words: Vec<String>,
    pub phoneme_ids: Vec<usize>,
    /// Word positions in the transcript the cue was cut from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_span: Option<Range<usize>>,
}

impl KeywordCue {
    /// Keyword length in phonemes.
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }
}

pub fn phonemize<S: AsRef<str>>(lexicon: &Lexicon, words: &[S]) -> Result<KeywordCue> {
    if words.is_empty() {
        return Err(Error::invalid("keyword cue needs at least one word"));
    }
    let mut ids = Vec::new();
    for w in words {
        let w = w.as_ref();
        ids.extend_from_slice(lexicon.pronunciation(w).ok_or_else(|| Error::OutOfVocabulary(w.to_string()))?);
    }
    Ok(KeywordCue {
        words: words.iter().map(|w| w.as_ref().to_string()).collect(),
        phoneme_ids: ids,
        source_span: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanMode {
    /// 2–6 consecutive words.
    Train,
    /// 1–4 consecutive words.
    Eval,
    /// Exactly `k` words.
    Exact(usize),
}

impl SpanMode {
    fn length_range(self) -> (usize, usize) {
        match self {
            SpanMode::Train => (2, 6),
            SpanMode::Eval => (1, 4),
            SpanMode::Exact(k) => (k.max(1), k.max(1)),
        }
    }
}

/// Draws a span length uniformly from the mode's range, clips it to the
/// transcript, then draws a uniform start.
pub fn sample_span<R: Rng + ?Sized>(transcript_len: usize, mode: SpanMode, rng: &mut R) -> Result<Range<usize>> {
    if transcript_len == 0 {
        return Err(Error::invalid("cannot sample keywords from an empty transcript"));
    }
    let (lo, hi) = mode.length_range();
    let len = rng.gen_range(lo..=hi).min(transcript_len);
    let start = rng.gen_range(0..=transcript_len - len);
    Ok(start..start + len)
}

pub fn sample_keywords<R: Rng + ?Sized, S: AsRef<str>>(
    lexicon: &Lexicon,
    transcript: &[S],
    mode: SpanMode,
    rng: &mut R,
) -> Result<KeywordCue> {
    let span = sample_span(transcript.len(), mode, rng)?;
    let mut cue = phonemize(lexicon, &transcript[span.clone()])?;
    cue.source_span = Some(span);
    Ok(cue)
}
