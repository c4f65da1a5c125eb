//! Videos, action segments, synthetic corpora and the observation protocol.

mod grammar;
mod io;
mod split;

pub use grammar::{generate_corpus, GrammarConfig};
pub use io::{
    export_features, ingest_features, load_manifest, read_split, write_manifest, write_split,
    ManifestEntry, SplitRecord,
};
pub use split::{
    split_full_weak, train_test_split, video_id, window, window_id, SplitSpec, WeakSample, WindowedSample,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid grammar: {0}")]
    Grammar(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid split configuration: {0}")]
    Config(String),
    #[error("degenerate window for video {id}: {reason}")]
    Degenerate { id: String, reason: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Validation { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionVocabulary {
    classes: Vec<String>,
}

impl ActionVocabulary {
    pub fn new(classes: Vec<String>) -> Result<Self, DatasetError> {
        if classes.len() < 2 {
            return Err(DatasetError::Vocabulary(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &classes {
            if !seen.insert(c) {
                return Err(DatasetError::Vocabulary(format!("duplicate class name {c:?}")));
            }
        }
        Ok(Self { classes })
    }

    /// `action_00`, `action_01`, ...
    pub fn numbered(k: usize) -> Result<Self, DatasetError> {
        Self::new((0..k).map(|i| format!("action_{i:02}")).collect())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.classes.get(class).map(String::as_str)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }
}

/// Row-major `frames × dim` feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(frames * dim, data.len(), "feature matrix shape");
        Self { frames, dim, data }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// The first `n` frames.
    pub fn head(&self, n: usize) -> Features {
        Features::new(n, self.dim, self.data[..n * self.dim].to_vec())
    }
}

/// A whole video: per-frame features and ground-truth frame labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub id: String,
    pub features: Features,
    pub frame_labels: Vec<usize>,
    pub fps: f64,
}

impl VideoSample {
    pub fn frames(&self) -> usize {
        self.frame_labels.len()
    }

    /// Segments of the whole video, durations as fractions of its length.
    pub fn segments(&self) -> Vec<ActionSegment> {
        segments_from_labels(&self.frame_labels, self.frames())
    }
}

/// `(c_m, d_m)`: a class and its duration as a fraction of the video length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub class_id: usize,
    pub duration: f64,
}

/// Run-length decomposition of `labels`; durations are divided by `total_frames`.
pub fn segments_from_labels(labels: &[usize], total_frames: usize) -> Vec<ActionSegment> {
    let total = total_frames as f64;
    let mut out: Vec<ActionSegment> = Vec::new();
    let mut run = 0usize;
    for (i, &c) in labels.iter().enumerate() {
        run += 1;
        if i + 1 == labels.len() || labels[i + 1] != c {
            out.push(ActionSegment {
                class_id: c,
                duration: run as f64 / total,
            });
            run = 0;
        }
    }
    out
}

/// Class sequence of consecutive runs.
pub fn run_classes(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &c in labels {
        if out.last() != Some(&c) {
            out.push(c);
        }
    }
    out
}
