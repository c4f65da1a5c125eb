//! Mean-over-classes, per-step accuracy and multi-seed statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{anticipate, argmax, rollout_values, AnticipateError, AnticipatedSequence, Backbone};
use crate::dataset::{ActionSegment, WindowedSample};
use crate::diffcore::{DiffError, ParamStore};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("horizon has no frames")]
    EmptyHorizon,
    #[error("cannot expand: {0}")]
    Segments(String),
    #[error("sequences have {pred} and {gt} frames")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("need at least 2 seeds for a standard deviation, got {0}")]
    TooFewSeeds(usize),
    #[error("no videos to evaluate")]
    NoVideos,
    #[error(transparent)]
    Anticipate(#[from] AnticipateError),
    #[error(transparent)]
    Numeric(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-frame class labels over a prediction horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub labels: Vec<usize>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Spreads segments over `horizon_frames` in proportion to their durations.
/// Frames left over after flooring go to the largest remainders.
pub fn expand_to_frames(segments: &[ActionSegment], horizon_frames: usize) -> Result<FrameSequence, EvalError> {
    if horizon_frames == 0 {
        return Err(EvalError::EmptyHorizon);
    }
    if segments.is_empty() {
        return Err(EvalError::Segments("no segments".into()));
    }
    if let Some(s) = segments.iter().find(|s| !(s.duration > 0.0 && s.duration.is_finite())) {
        return Err(EvalError::Segments(format!("duration {} is not positive", s.duration)));
    }
    let total: f64 = segments.iter().map(|s| s.duration).sum();
    let exact: Vec<f64> = segments.iter().map(|s| s.duration / total * horizon_frames as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(horizon_frames.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    let mut labels = Vec::with_capacity(horizon_frames);
    for (s, n) in segments.iter().zip(counts) {
        labels.extend(std::iter::repeat_n(s.class_id, n));
    }
    labels.truncate(horizon_frames);
    Ok(FrameSequence { labels })
}

/// Per-class frame counts pooled over any number of sequence pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MocAccumulator {
    per_class: BTreeMap<usize, (usize, usize)>,
}

impl MocAccumulator {
    pub fn add(&mut self, pred: &FrameSequence, gt: &FrameSequence) -> Result<(), EvalError> {
        if pred.len() != gt.len() {
            return Err(EvalError::LengthMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        for (p, g) in pred.labels.iter().zip(&gt.labels) {
            let e = self.per_class.entry(*g).or_insert((0, 0));
            e.1 += 1;
            if p == g {
                e.0 += 1;
            }
        }
        Ok(())
    }

    /// Unweighted mean of per-class accuracy over classes present in the ground truth.
    pub fn moc(&self) -> Option<f64> {
        if self.per_class.is_empty() {
            return None;
        }
        let sum: f64 = self.per_class.values().map(|(c, n)| *c as f64 / *n as f64).sum();
        Some(sum / self.per_class.len() as f64)
    }
}

pub fn mean_over_classes(pred: &FrameSequence, gt: &FrameSequence) -> Result<f64, EvalError> {
    let mut acc = MocAccumulator::default();
    acc.add(pred, gt)?;
    acc.moc().ok_or(EvalError::EmptyHorizon)
}

/// Fraction of videos whose step-`m` class matches, for `m < max_steps`.
/// Videos without a step `m` in either sequence leave that step's
/// denominator. The list stops at the first step no video reaches.
pub fn per_step_accuracy(pairs: &[(Vec<usize>, Vec<usize>)], max_steps: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for m in 0..max_steps {
        let mut hits = 0usize;
        let mut n = 0usize;
        for (pred, gt) in pairs {
            if m < gt.len() && m < pred.len() {
                n += 1;
                if pred[m] == gt[m] {
                    hits += 1;
                }
            }
        }
        if n == 0 {
            break;
        }
        out.push(hits as f64 / n as f64);
    }
    out
}

/// Sample mean and standard deviation (`n − 1` denominator).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewSeeds(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,moc\n");
        for (seed, moc) in &self.rows {
            let _ = writeln!(s, "{seed},{moc}");
        }
        s
    }
}

/// Runs `run_fn` once per seed and summarises the returned metric.
pub fn seed_sweep<E>(
    seeds: &[u64],
    mut run_fn: impl FnMut(u64) -> Result<f64, E>,
) -> Result<SweepSummary, E>
where
    E: From<EvalError>,
{
    if seeds.len() < 2 {
        return Err(EvalError::TooFewSeeds(seeds.len()).into());
    }
    let mut rows = Vec::with_capacity(seeds.len());
    for &s in seeds {
        rows.push((s, run_fn(s)?));
    }
    let values: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mean, std) = mean_std(&values)?;
    Ok(SweepSummary { rows, mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub moc: f64,
    pub per_step_accuracy: Vec<f64>,
    pub n_videos: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("metric report serialises");
        std::fs::write(path, text + "\n").map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Predicted segments `(argmax class, duration)` of a sequence.
pub fn predicted_segments(seq: &AnticipatedSequence) -> Vec<ActionSegment> {
    seq.steps
        .iter()
        .map(|s| ActionSegment {
            class_id: s.argmax(),
            duration: s.duration,
        })
        .collect()
}

/// Horizon-fitted prediction and its frame expansion for one window.
pub fn predict_frames(
    model: &Backbone,
    store: &ParamStore,
    sample: &WindowedSample,
) -> Result<(AnticipatedSequence, FrameSequence), EvalError> {
    let seq = anticipate(model, store, &sample.observed, None, sample.horizon_length())?;
    let mut segs = predicted_segments(&seq);
    // A horizon fit can leave a zero-length tail; it owns no frames.
    segs.retain(|s| s.duration > 0.0);
    let frames = expand_to_frames(&segs, sample.horizon_frames)?;
    Ok((seq, frames))
}

/// Steps decoded for per-step accuracy, regardless of the horizon.
pub const ACCURACY_STEPS: usize = 4;

/// Pooled MoC and per-step accuracy of `model` over `windows`.
pub fn evaluate(model: &Backbone, store: &ParamStore, windows: &[WindowedSample], seed: u64) -> Result<MetricReport, EvalError> {
    if windows.is_empty() {
        return Err(EvalError::NoVideos);
    }
    let mut acc = MocAccumulator::default();
    let mut pairs = Vec::with_capacity(windows.len());
    for w in windows {
        let (_, pred) = predict_frames(model, store, w)?;
        let gt = expand_to_frames(&w.target_segments, w.horizon_frames)?;
        acc.add(&pred, &gt)?;
        let steps = rollout_values(model, store, &w.observed, None, ACCURACY_STEPS)?;
        let classes: Vec<usize> = steps.steps.iter().map(|s| argmax(&s.class_dist)).collect();
        pairs.push((classes, w.future_classes.clone()));
    }
    Ok(MetricReport {
        moc: acc.moc().ok_or(EvalError::EmptyHorizon)?,
        per_step_accuracy: per_step_accuracy(&pairs, ACCURACY_STEPS),
        n_videos: windows.len(),
        seed,
        config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(c: usize, d: f64) -> ActionSegment {
        ActionSegment { class_id: c, duration: d }
    }

    fn frames(s: &str) -> FrameSequence {
        FrameSequence {
            labels: s.bytes().map(|b| (b - b'A') as usize).collect(),
        }
    }

    #[test]
    fn footnote_example_scores_a_quarter() {
        let gt = frames("AABBCCDD");
        let pred = frames("AAAABBCCDD");
        let pred = FrameSequence {
            labels: pred.labels[..8].to_vec(),
        };
        assert!((mean_over_classes(&pred, &gt).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn moc_extremes() {
        assert_eq!(mean_over_classes(&frames("ABCA"), &frames("ABCA")).unwrap(), 1.0);
        assert_eq!(mean_over_classes(&frames("BBAA"), &frames("AABB")).unwrap(), 0.0);
        assert!(matches!(
            mean_over_classes(&frames("AB"), &frames("ABC")),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn expansion_examples() {
        assert_eq!(expand_to_frames(&[seg(0, 0.5), seg(1, 0.5)], 8).unwrap(), frames("AAAABBBB"));
        assert_eq!(expand_to_frames(&[seg(2, 0.37)], 5).unwrap(), frames("CCCCC"));
        assert!(matches!(expand_to_frames(&[seg(0, 1.0)], 0), Err(EvalError::EmptyHorizon)));
        assert!(expand_to_frames(&[seg(0, 0.0)], 3).is_err());
        // 3 × 1/3 over 10 frames: the first remainder wins the spare frame.
        assert_eq!(expand_to_frames(&[seg(0, 1.0), seg(1, 1.0), seg(2, 1.0)], 10).unwrap(), frames("AAAABBBCCC"));
    }

    #[test]
    fn per_step_examples() {
        let acc = per_step_accuracy(&[(vec![0, 1, 2], vec![0, 2, 2])], 4);
        assert_eq!(acc, vec![1.0, 0.0, 1.0]);
        let all = per_step_accuracy(&[(vec![1, 2, 3, 4], vec![1, 2, 3, 4]), (vec![5, 6, 7, 8], vec![5, 6, 7, 8])], 4);
        assert_eq!(all, vec![1.0; 4]);
        let uneven = per_step_accuracy(&[(vec![1, 2], vec![1, 2]), (vec![1, 2], vec![1])], 4);
        assert_eq!(uneven, vec![1.0, 1.0]);
    }

    #[test]
    fn mean_and_std() {
        assert_eq!(mean_std(&[0.3, 0.3, 0.3]).unwrap(), (0.3, 0.0));
        let (m, s) = mean_std(&[0.1, 0.2]).unwrap();
        assert!((m - 0.15).abs() < 1e-12);
        assert!((s - 0.5f64.sqrt() * 0.1).abs() < 1e-12);
        assert!(matches!(mean_std(&[0.1]), Err(EvalError::TooFewSeeds(1))));
        let sw = seed_sweep::<EvalError>(&[1, 2], |s| Ok(s as f64 / 10.0)).unwrap();
        assert_eq!(sw.to_csv(), "seed,moc\n1,0.1\n2,0.2\n");
    }
}
