//! Keyword detection and localization by a max-score monotone path through a
//! keyword-by-frame attention map.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Frame shift of the speech features the attention map is indexed by.
pub const FRAME_SHIFT_MS: f64 = 10.0;

/// Threshold used when none is configured.
pub const DEFAULT_THRESHOLD: f64 = 0.33;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    Raw,
    #[default]
    Normalized,
}

impl FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Scoring::Raw),
            "normalized" => Ok(Scoring::Normalized),
            other => Err(Error::invalid(format!("unknown scoring mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxPath<T> {
    pub score: T,
    pub start_frame: usize,
    /// First frame aligned to the last keyword row.
    pub trigger_frame: usize,
    /// Visited `(row, frame)` cells in frame order.
    pub path: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult<T> {
    pub raw_score: T,
    pub normalized_score: T,
    pub start_frame: usize,
    pub trigger_frame: usize,
    pub detected: bool,
    pub path: Vec<(usize, usize)>,
}

impl<T: Scalar> DetectionResult<T> {
    pub fn score(&self, scoring: Scoring) -> T {
        match scoring {
            Scoring::Raw => self.raw_score,
            Scoring::Normalized => self.normalized_score,
        }
    }

    /// Predicted keyword span in frames, `(start, end)` inclusive.
    pub fn span(&self) -> (usize, usize) {
        (self.start_frame, self.trigger_frame.saturating_sub(1).max(self.start_frame))
    }
}

/// Runs the dynamic program over `map` (`[K, T]`, nonnegative).
///
/// Row 0 is entered once; each later step advances one frame and either stays
/// in the current row or moves to the next. Cells a valid path cannot reach
/// (`t < k`) never contribute. `K > T` has no valid path.
pub fn keyword_max_path<T: Scalar>(map: &Array<T>) -> Result<MaxPath<T>> {
    if map.rank() != 2 {
        return Err(Error::shape("keyword_max_path", "[K, T]", map.shape()));
    }
    let (rows, frames) = (map.dim(0), map.dim(1));
    if rows == 0 || frames == 0 {
        return Err(Error::invalid("attention map is empty"));
    }
    if rows > frames {
        return Err(Error::NoPath { rows, frames });
    }
    let m = map.data();
    let idx = |k: usize, t: usize| k * frames + t;

    if rows == 1 {
        let (best, score) = argmax(&m[..frames]);
        return Ok(MaxPath {
            score,
            start_frame: best,
            trigger_frame: best + 1,
            path: vec![(0, best)],
        });
    }

    let neg = T::neg_infinity();
    let mut dp = vec![neg; rows * frames];
    // true when the predecessor of (k, t) is (k-1, t-1)
    let mut diag = vec![false; rows * frames];
    dp[..frames].copy_from_slice(&m[..frames]);
    for k in 1..rows {
        for t in k..frames {
            let from_diag = dp[idx(k - 1, t - 1)];
            let from_row = dp[idx(k, t - 1)];
            let take_diag = from_diag > from_row;
            diag[idx(k, t)] = take_diag;
            dp[idx(k, t)] = m[idx(k, t)] + if take_diag { from_diag } else { from_row };
        }
    }

    let (end, score) = argmax(&dp[idx(rows - 1, 0)..]);
    let mut path = vec![(rows - 1, end)];
    let (mut k, mut t) = (rows - 1, end);
    while k > 0 {
        if diag[idx(k, t)] {
            k -= 1;
        }
        t -= 1;
        path.push((k, t));
    }
    path.reverse();
    let start_frame = t;
    let trigger_frame = path.iter().find(|c| c.0 == rows - 1).map(|c| c.1).unwrap_or(end);
    Ok(MaxPath {
        score,
        start_frame,
        trigger_frame,
        path,
    })
}

fn argmax<T: Scalar>(values: &[T]) -> (usize, T) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn detect<T: Scalar>(map: &Array<T>, threshold: T, scoring: Scoring) -> Result<DetectionResult<T>> {
    if threshold.is_nan() || threshold == T::infinity() {
        return Err(Error::invalid("detection threshold must be a number below +inf"));
    }
    let best = keyword_max_path(map)?;
    let normalized = best.score / T::of(best.path.len() as f64);
    let result = DetectionResult {
        raw_score: best.score,
        normalized_score: normalized,
        start_frame: best.start_frame,
        trigger_frame: best.trigger_frame,
        detected: false,
        path: best.path,
    };
    let detected = result.score(scoring) >= threshold;
    Ok(DetectionResult { detected, ..result })
}

pub fn frames_to_ms(frame: usize) -> f64 {
    frame as f64 * FRAME_SHIFT_MS
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    shape: [usize; 2],
    data: Vec<Vec<f64>>,
}

pub fn map_to_json<T: Scalar>(map: &Array<T>) -> Result<String> {
    if map.rank() != 2 {
        return Err(Error::shape("map_to_json", "[K, T]", map.shape()));
    }
    let file = MapFile {
        shape: [map.dim(0), map.dim(1)],
        data: (0..map.dim(0)).map(|k| map.row(k).iter().map(|v| v.as_f64()).collect()).collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn map_from_json<T: Scalar>(text: &str) -> Result<Array<T>> {
    let file: MapFile = serde_json::from_str(text)?;
    let [k, t] = file.shape;
    if file.data.len() != k || file.data.iter().any(|r| r.len() != t) {
        return Err(Error::Format(format!("attention map rows do not match shape [{k}, {t}]")));
    }
    let flat: Vec<f64> = file.data.into_iter().flatten().collect();
    Array::from_f64(&[k, t], &flat)
}

pub fn save_map<T: Scalar>(map: &Array<T>, path: &Path) -> Result<()> {
    fs::write(path, map_to_json(map)?).map_err(|e| Error::io(path, e))
}

pub fn load_map<T: Scalar>(path: &Path) -> Result<Array<T>> {
    map_from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
