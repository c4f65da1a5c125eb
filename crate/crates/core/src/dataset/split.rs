use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_classes, segments_from_labels, ActionSegment, DatasetError, Features, VideoSample};

/// Tolerance applied before flooring `fraction · frames`.
const FRAME_EPS: f64 = 1e-9;

/// A video cut at the observation boundary, with its future targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    pub id: String,
    pub observed: Features,
    /// Segments of frames `T+1 ..= horizon end`; the last one is cut at the horizon.
    pub target_segments: Vec<ActionSegment>,
    /// Label of frame `T+1`.
    pub weak_label: usize,
    pub observed_fraction: f64,
    pub horizon_fraction: f64,
    pub horizon_frames: usize,
    pub total_frames: usize,
    /// Class of every remaining segment after the boundary, to the end of the video.
    pub future_classes: Vec<usize>,
}

impl WindowedSample {
    /// Horizon length implied by the frame grid, as a fraction of the video.
    pub fn horizon_length(&self) -> f64 {
        self.horizon_frames as f64 / self.total_frames as f64
    }

    /// Drops every future label except the weak one.
    pub fn to_weak(&self) -> WeakSample {
        WeakSample {
            id: self.id.clone(),
            observed: self.observed.clone(),
            weak_label: self.weak_label,
            horizon_fraction: self.horizon_fraction,
        }
    }
}

/// What survives of a weakly-labelled video: observed frames and `c₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakSample {
    pub id: String,
    pub observed: Features,
    pub weak_label: usize,
    pub horizon_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub full_fraction: f64,
    pub seed: u64,
    pub observed_fraction: f64,
    pub predicted_fraction: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.full_fraction > 0.0 && self.full_fraction < 1.0) {
            return Err(DatasetError::Config(format!(
                "full_fraction must be in (0,1), got {}",
                self.full_fraction
            )));
        }
        check_window(self.observed_fraction, self.predicted_fraction)
    }
}

fn check_window(x: f64, y: f64) -> Result<(), DatasetError> {
    if !(x > 0.0 && y > 0.0 && x + y <= 1.0 + FRAME_EPS) {
        return Err(DatasetError::Config(format!(
            "observation window X={x}, Y={y} must satisfy 0<X, 0<Y, X+Y<=1"
        )));
    }
    Ok(())
}

/// Observe the first `x` of the video, target the following `y`.
pub fn window(sample: &VideoSample, x: f64, y: f64) -> Result<WindowedSample, DatasetError> {
    check_window(x, y)?;
    let total = sample.frames();
    let t_obs = ((x * total as f64) + FRAME_EPS).floor() as usize;
    let end = (((x + y) * total as f64) + FRAME_EPS).floor().min(total as f64) as usize;
    let degenerate = |reason: &str| DatasetError::Degenerate {
        id: sample.id.clone(),
        reason: reason.to_string(),
    };
    if t_obs == 0 {
        return Err(degenerate("no observed frames"));
    }
    if end <= t_obs {
        return Err(degenerate("prediction horizon contains no frames"));
    }
    Ok(WindowedSample {
        id: sample.id.clone(),
        observed: sample.features.head(t_obs),
        target_segments: segments_from_labels(&sample.frame_labels[t_obs..end], total),
        weak_label: sample.frame_labels[t_obs],
        observed_fraction: x,
        horizon_fraction: y,
        horizon_frames: end - t_obs,
        total_frames: total,
        future_classes: run_classes(&sample.frame_labels[t_obs..]),
    })
}

/// Id of an extra window of video `id` observed up to `x`.
pub fn window_id(id: &str, x: f64) -> String {
    format!("{id}@{x}")
}

/// Video id behind a window id made by [`window_id`].
pub fn video_id(window_id: &str) -> &str {
    window_id.split_once('@').map_or(window_id, |(v, _)| v)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Partition into a fully-labelled set 𝓕 and a weakly-labelled set 𝓦.
/// Weak members keep only observed frames and the weak label.
pub fn split_full_weak(
    corpus: &[VideoSample],
    spec: &SplitSpec,
) -> Result<(Vec<WindowedSample>, Vec<WeakSample>), DatasetError> {
    spec.validate()?;
    let n = corpus.len();
    if n == 0 {
        return Err(DatasetError::Config("cannot split an empty corpus".into()));
    }
    let n_full = (spec.full_fraction * n as f64).round() as usize;
    if n_full == 0 || n_full == n {
        return Err(DatasetError::Config(format!(
            "full_fraction {} of {n} videos leaves one side empty",
            spec.full_fraction
        )));
    }
    let order = shuffled_indices(n, spec.seed);
    let mut full = Vec::with_capacity(n_full);
    let mut weak = Vec::with_capacity(n - n_full);
    for (rank, &i) in order.iter().enumerate() {
        let w = match window(&corpus[i], spec.observed_fraction, spec.predicted_fraction) {
            Ok(w) => w,
            Err(e @ DatasetError::Degenerate { .. }) => {
                log::warn!("skipping sample: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        if rank < n_full {
            full.push(w);
        } else {
            weak.push(w.to_weak());
        }
    }
    Ok((full, weak))
}

/// Seeded train/test partition of whole videos.
pub fn train_test_split(
    corpus: &[VideoSample],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>), DatasetError> {
    let n = corpus.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if !(test_fraction > 0.0 && test_fraction < 1.0) || n_test == 0 || n_test >= n {
        return Err(DatasetError::Config(format!(
            "test_fraction {test_fraction} of {n} videos leaves one side empty"
        )));
    }
    let order = shuffled_indices(n, seed);
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| corpus[i].clone()).collect(),
        test_idx.into_iter().map(|i| corpus[i].clone()).collect(),
    ))
}
