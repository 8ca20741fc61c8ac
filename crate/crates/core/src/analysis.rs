//! Periodicity measurements on per-frame features.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};

use crate::error::{ensure, Result, TpaError};
use crate::features::FeatureSequence;
use crate::pipeline::model::{FrameStage, ModelParams};
use crate::features::ModelInput;

/// Minimum rise of a peak over the lowest similarity at any shorter lag.
pub const DEFAULT_PROMINENCE: f64 = 0.1;
/// Peaks within this distance of the best one count as tied.
pub const DEFAULT_TIE_TOLERANCE: f64 = 0.05;

/// Cosine similarity between every pair of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn frame_count(&self) -> usize {
        self.values.nrows()
    }
}

/// `values[i][j]` = cosine of frames `i` and `j` of `features: [T × C]`.
pub fn self_similarity(features: &Array2<f64>) -> Result<SimilarityMatrix> {
    let norms: Vec<f64> = features.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(TpaError::domain(format!("frame {i} has zero norm")));
    }
    let t = features.nrows();
    let mut values = Array2::zeros((t, t));
    for i in 0..t {
        values[[i, i]] = 1.0;
        for j in (i + 1)..t {
            let v = (features.row(i).dot(&features.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix { values })
}

/// Mean cosine between mean-centred frames `lag` apart; `None` when no pair
/// of nonzero centred frames exists at that lag.
pub fn lag_similarity(features: &Array2<f64>, lag: usize) -> Option<f64> {
    let t = features.nrows();
    if lag >= t {
        return None;
    }
    let mean = features.mean_axis(Axis(0))?;
    let centred = features - &mean;
    let norms: Vec<f64> = centred.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..t - lag {
        let (a, b) = (norms[i], norms[i + lag]);
        if a <= tiny || b <= tiny {
            continue;
        }
        sum += centred.row(i).dot(&centred.row(i + lag)) / (a * b);
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodOptions {
    pub prominence: f64,
    pub tie_tolerance: f64,
}

impl Default for PeriodOptions {
    fn default() -> Self {
        PeriodOptions {
            prominence: DEFAULT_PROMINENCE,
            tie_tolerance: DEFAULT_TIE_TOLERANCE,
        }
    }
}

pub fn estimate_period(features: &Array2<f64>) -> Option<usize> {
    estimate_period_with(features, PeriodOptions::default())
}

/// Lag in `[2, T/2]` of the strongest prominent peak of [`lag_similarity`].
///
/// A lag is a peak when it is no lower than its neighbours inside the search
/// range; it is prominent when it rises at least `prominence` above the lowest
/// value at any lag from 1 up to it. Among peaks within `tie_tolerance` of the
/// best, the shortest lag wins, so harmonics of the period lose to it.
pub fn estimate_period_with(features: &Array2<f64>, opts: PeriodOptions) -> Option<usize> {
    let t = features.nrows();
    if t < 8 {
        return None;
    }
    let max_lag = t / 2;
    let r: Vec<Option<f64>> = (0..=max_lag).map(|l| if l == 0 { None } else { lag_similarity(features, l) }).collect();
    let mut peaks = Vec::new();
    let mut floor = f64::INFINITY;
    for l in 1..=max_lag {
        let Some(v) = r[l] else { return None };
        floor = floor.min(v);
        if l < 2 {
            continue;
        }
        let left_ok = r[l - 1].is_some_and(|p| v >= p);
        let right_ok = l == max_lag || r[l + 1].is_some_and(|n| v >= n);
        if left_ok && right_ok && v - floor >= opts.prominence {
            peaks.push((l, v));
        }
    }
    let best = peaks.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    peaks
        .into_iter()
        .find(|&(_, v)| v >= best - opts.tie_tolerance)
        .map(|(l, _)| l)
}

/// A `[T × P·C]` matrix with all parts of each frame side by side.
pub fn sequence_matrix(seq: &FeatureSequence) -> Array2<f64> {
    let (p, c, t) = seq.values.dim();
    let mut out = Array2::zeros((t, p * c));
    for part in 0..p {
        for ch in 0..c {
            for f in 0..t {
                out[[f, part * c + ch]] = seq.values[[part, ch, f]];
            }
        }
    }
    out
}

/// Mean over parts of the lag-`lag` similarity of per-frame model features.
pub fn periodicity_score(model: &ModelParams, input: &ModelInput, stage: FrameStage, lag: usize) -> Result<f64> {
    let feats = model.frame_features(input, stage)?;
    let scores: Vec<f64> = feats.iter().filter_map(|f| lag_similarity(f, lag)).collect();
    ensure!(!scores.is_empty(), "no frame pairs at lag {lag}");
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Grey level of a similarity value: `round(255·(v+1)/2)`.
pub fn grey_level(v: f64) -> u8 {
    (255.0 * (v.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8
}

/// Writes `<prefix>.csv` (row-major, shortest round-trip floats) and
/// `<prefix>.pgm` (binary 8-bit graymap); returns both paths.
pub fn export_heatmap(matrix: &SimilarityMatrix, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv_path = prefix.with_extension("csv");
    let pgm_path = prefix.with_extension("pgm");
    let mut csv = String::new();
    for row in matrix.values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(csv, "{}", cells.join(",")).expect("writing to a string");
    }
    fs::write(&csv_path, csv).map_err(|e| TpaError::io(&csv_path, e))?;
    let (h, w) = matrix.values.dim();
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(matrix.values.iter().map(|&v| grey_level(v)));
    fs::write(&pgm_path, pgm).map_err(|e| TpaError::io(&pgm_path, e))?;
    Ok((csv_path, pgm_path))
}
