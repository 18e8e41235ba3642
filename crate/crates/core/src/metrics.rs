//! Coefficient-level evaluation: per-stream L2 error, discrete Fréchet
//! distance, pairwise diversity and an audio-energy/jaw correlation proxy
//! for lip synchronization.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coeffstream::{CoefficientSequence, DETAIL_COLS, HEAD_COLS, JAW_COLS};
use crate::error::{Error, Result};

/// Reporting scale applied by [`l2_error`].
pub const L2_SCALE: f64 = 1000.0;
/// Largest lag, in frames, searched by the sync proxy.
pub const MAX_SYNC_LAG: i64 = 5;

fn row_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean per-frame Euclidean distance, times [`L2_SCALE`].
pub fn l2_error(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    if pred.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = pred.rows().into_iter().zip(gt.rows()).map(|(a, b)| row_distance(a, b)).sum();
    Ok(total / pred.nrows() as f64 * L2_SCALE)
}

/// Discrete Fréchet distance under the Euclidean ground metric.
pub fn frechet_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("curve widths {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Shape("curves need at least one point".into()));
    }
    let (n, m) = (a.nrows(), b.nrows());
    // Rolling rows of the coupling table.
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            let d = row_distance(a.row(i), b.row(j));
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]),
            };
            cur[j] = d.max(best);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Seeded disjoint pairs over `0..n`: shuffle, then pair neighbours.
/// `pairs == 0` takes as many as possible.
pub fn sample_pairs(n: usize, pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let max = n / 2;
    let count = if pairs == 0 { max } else { pairs.min(max) };
    (0..count).map(|k| (idx[2 * k], idx[2 * k + 1])).collect()
}

/// Mean over seeded disjoint pairs of the mean per-frame distance between
/// the pair members.
pub fn diversity(sequences: &[ArrayView2<'_, f64>], pairs: usize, seed: u64) -> Result<f64> {
    if sequences.len() < 2 {
        return Err(Error::Data(format!("diversity needs at least 2 sequences, got {}", sequences.len())));
    }
    let shape = sequences[0].dim();
    if sequences.iter().any(|s| s.dim() != shape) {
        return Err(Error::Shape("diversity needs sequences of equal shape".into()));
    }
    let chosen = sample_pairs(sequences.len(), pairs, seed);
    let mut total = 0.0;
    for &(i, j) in &chosen {
        total += l2_error(sequences[i], sequences[j])? / L2_SCALE;
    }
    Ok(total / chosen.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    pub corr: f64,
    /// Positive when the motion trails the audio.
    pub lag: i64,
    pub degenerate: bool,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 1e-24 || syy <= 1e-24 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Highest Pearson correlation of `signal[t]` against `motion[t + lag]`
/// over `|lag| <= max_lag`; ties go to the smallest `|lag|`, then to the
/// negative lag.
pub fn lagged_correlation(signal: &[f64], motion: &[f64], max_lag: i64) -> Result<SyncResult> {
    if signal.len() != motion.len() {
        return Err(Error::Alignment(format!(
            "{} signal frames vs {} motion frames",
            signal.len(),
            motion.len()
        )));
    }
    if pearson(signal, motion).is_none() && (variance(signal) <= 1e-24 || variance(motion) <= 1e-24) {
        return Ok(SyncResult {
            corr: 0.0,
            lag: 0,
            degenerate: true,
        });
    }
    let n = signal.len() as i64;
    let mut best: Option<(f64, i64)> = None;
    let lags = std::iter::once(0).chain((1..=max_lag).flat_map(|l| [-l, l]));
    for lag in lags {
        let start = 0.max(-lag);
        let end = n.min(n - lag);
        if end - start < 2 {
            continue;
        }
        let x = &signal[start as usize..end as usize];
        let y = &motion[(start + lag) as usize..(end + lag) as usize];
        if let Some(c) = pearson(x, y) {
            if best.is_none_or(|(b, _)| c > b) {
                best = Some((c, lag));
            }
        }
    }
    Ok(match best {
        Some((corr, lag)) => SyncResult {
            corr,
            lag,
            degenerate: false,
        },
        None => SyncResult {
            corr: 0.0,
            lag: 0,
            degenerate: true,
        },
    })
}

fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Per-frame Euclidean norm over a column range.
pub fn column_norms(frames: ArrayView2<'_, f64>, cols: std::ops::Range<usize>) -> Vec<f64> {
    frames
        .slice(s![.., cols])
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect()
}

/// Correlation between per-frame audio energy and jaw opening (norm of the
/// first three mouth-stream columns).
pub fn sync_proxy(energy: &[f64], mouth: ArrayView2<'_, f64>) -> Result<SyncResult> {
    if mouth.ncols() < 3 {
        return Err(Error::Shape("mouth stream needs the three jaw columns".into()));
    }
    lagged_correlation(energy, &column_norms(mouth, 0..3), MAX_SYNC_LAG)
}

// ---------------------------------------------------------------------------
// Reports

/// Inputs for evaluating one clip.
#[derive(Debug, Clone)]
pub struct ClipEval {
    pub clip_id: String,
    pub prediction: CoefficientSequence,
    pub ground_truth: CoefficientSequence,
    /// Per-frame audio RMS energy, aligned with the prediction.
    pub energy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub pose_error: f64,
    pub mouth_error: f64,
    pub detail_error: f64,
    pub frechet_distance: f64,
    pub sync_corr: f64,
    pub sync_lag_frames: f64,
    pub head_sync_corr: f64,
    pub sync_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pose_error: f64,
    pub mouth_error: f64,
    pub detail_error: f64,
    pub frechet_distance: f64,
    pub diversity: f64,
    pub sync_corr: f64,
    pub sync_lag_frames: f64,
    /// Same proxy with head-rotation magnitude in place of jaw opening.
    pub head_sync_corr: f64,
    pub clip_count: usize,
    pub diversity_seed: u64,
    pub diversity_pairs: usize,
}

pub fn evaluate_clip(clip: &ClipEval) -> Result<ClipMetrics> {
    let p = clip.prediction.frames();
    let g = clip.ground_truth.frames();
    if p.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "clip {}: prediction {:?} vs ground truth {:?}",
            clip.clip_id,
            p.dim(),
            g.dim()
        )));
    }
    let mouth_cols = JAW_COLS.start..DETAIL_COLS.start;
    let sync = sync_proxy(&clip.energy, p.slice(s![.., JAW_COLS.start..]))?;
    let head = lagged_correlation(&clip.energy, &column_norms(p.view(), HEAD_COLS), MAX_SYNC_LAG)?;
    Ok(ClipMetrics {
        clip_id: clip.clip_id.clone(),
        pose_error: l2_error(p.slice(s![.., HEAD_COLS]), g.slice(s![.., HEAD_COLS]))?,
        mouth_error: l2_error(p.slice(s![.., mouth_cols.clone()]), g.slice(s![.., mouth_cols]))?,
        detail_error: l2_error(p.slice(s![.., DETAIL_COLS]), g.slice(s![.., DETAIL_COLS]))?,
        frechet_distance: frechet_distance(p.view(), g.view())?,
        sync_corr: sync.corr,
        sync_lag_frames: sync.lag as f64,
        head_sync_corr: head.corr,
        sync_degenerate: sync.degenerate,
    })
}

/// Aggregates per-clip metrics (means over clips) and computes head-pose
/// diversity over the predictions, truncated to the shortest clip.
pub fn evaluate(clips: &[ClipEval], diversity_pairs: usize, seed: u64) -> Result<(EvalReport, Vec<ClipMetrics>)> {
    if clips.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let per_clip: Vec<ClipMetrics> = clips.iter().map(evaluate_clip).collect::<Result<_>>()?;
    let n = per_clip.len() as f64;
    let mean = |f: fn(&ClipMetrics) -> f64| per_clip.iter().map(f).sum::<f64>() / n;
    let diversity = if clips.len() >= 2 {
        let t = clips.iter().map(|c| c.prediction.len()).min().unwrap_or(0);
        let heads: Vec<Array2<f64>> = clips
            .iter()
            .map(|c| c.prediction.frames().slice(s![..t, HEAD_COLS]).to_owned())
            .collect();
        let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
        diversity(&views, diversity_pairs, seed)?
    } else {
        0.0
    };
    let report = EvalReport {
        pose_error: mean(|c| c.pose_error),
        mouth_error: mean(|c| c.mouth_error),
        detail_error: mean(|c| c.detail_error),
        frechet_distance: mean(|c| c.frechet_distance),
        diversity,
        sync_corr: mean(|c| c.sync_corr),
        sync_lag_frames: mean(|c| c.sync_lag_frames),
        head_sync_corr: mean(|c| c.head_sync_corr),
        clip_count: per_clip.len(),
        diversity_seed: seed,
        diversity_pairs: sample_pairs(clips.len(), diversity_pairs, seed).len(),
    };
    Ok((report, per_clip))
}

pub const CSV_HEADER: &str =
    "clip_id,pose_error,mouth_error,detail_error,frechet_distance,sync_corr,sync_lag_frames,head_sync_corr,sync_degenerate";

pub fn clip_metrics_csv(rows: &[ClipMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.clip_id,
            r.pose_error,
            r.mouth_error,
            r.detail_error,
            r.frechet_distance,
            r.sync_corr,
            r.sync_lag_frames,
            r.head_sync_corr,
            r.sync_degenerate
        );
    }
    out
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests;
