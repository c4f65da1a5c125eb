use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ActionVocabulary, DatasetError, Features, VideoSample};

/// Parameters of the synthetic action grammar.
///
/// Videos are Markov walks over classes. Each class has a dominant successor
/// (taken with probability `successor_prob`), a mean segment length, and a
/// unit-norm feature centroid. With `duration_coupling > 0` a segment's length
/// is scaled by a factor that depends on the class before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub fps: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    pub mean_segment_frames: f64,
    /// Per-class mean lengths are spread evenly over `mean·[1-s, 1+s]`.
    pub duration_spread: f64,
    /// Relative standard deviation of a segment length around its mean.
    pub duration_std: f64,
    pub successor_prob: f64,
    /// Explicit transition matrix; overrides `successor_prob` when present.
    pub transition: Option<Vec<Vec<f64>>>,
    pub duration_coupling: f64,
    /// Emit one-hot frame labels as features instead of Gaussian clusters.
    pub oracle_features: bool,
    /// Seed for the grammar structure (successors, centroids, class lengths).
    pub structure_seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            feature_dim: 64,
            noise_std: 0.5,
            fps: 15.0,
            min_segments: 6,
            max_segments: 10,
            mean_segment_frames: 12.0,
            duration_spread: 0.4,
            duration_std: 0.25,
            successor_prob: 0.8,
            transition: None,
            duration_coupling: 0.0,
            oracle_features: false,
            structure_seed: 0,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Grammar(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.feature_dim == 0 && !self.oracle_features {
            return bad("feature_dim must be >= 1".into());
        }
        if !(self.noise_std >= 0.0) || !(self.fps > 0.0) {
            return bad("noise_std must be >= 0 and fps > 0".into());
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad(format!(
                "segment count range {}..={} is empty",
                self.min_segments, self.max_segments
            ));
        }
        if !(self.mean_segment_frames >= 1.0) {
            return bad("mean_segment_frames must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.duration_spread) || !(self.duration_std >= 0.0) {
            return bad("duration_spread must be in [0,1) and duration_std >= 0".into());
        }
        if !(0.0..1.0).contains(&self.duration_coupling) {
            return bad("duration_coupling must be in [0,1)".into());
        }
        match &self.transition {
            Some(t) => {
                if t.len() != self.n_classes {
                    return bad(format!("transition has {} rows, expected {}", t.len(), self.n_classes));
                }
                for (i, row) in t.iter().enumerate() {
                    if row.len() != self.n_classes {
                        return bad(format!("transition row {i} has {} entries", row.len()));
                    }
                    if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return bad(format!("transition row {i} is not on the simplex"));
                    }
                    if row[i] != 0.0 {
                        return bad(format!("transition row {i} has a self-transition"));
                    }
                }
            }
            None => {
                if !(0.0..=1.0).contains(&self.successor_prob) {
                    return bad("successor_prob must be in [0,1]".into());
                }
            }
        }
        Ok(())
    }

    /// Expected frames per video when class visits are balanced.
    pub fn nominal_mean_frames(&self) -> f64 {
        (self.min_segments + self.max_segments) as f64 / 2.0 * self.mean_segment_frames
    }

    pub fn effective_feature_dim(&self) -> usize {
        if self.oracle_features {
            self.n_classes
        } else {
            self.feature_dim
        }
    }
}

struct Structure {
    transition: Vec<Vec<f64>>,
    mean_frames: Vec<f64>,
    coupling: Vec<f64>,
    centroids: Vec<Vec<f64>>,
}

fn spread(k: usize, lo: f64, hi: f64) -> Vec<f64> {
    if k == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

fn build_structure(g: &GrammarConfig) -> Structure {
    let k = g.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(g.structure_seed);
    let transition = match &g.transition {
        Some(t) => t.clone(),
        None => {
            // One cycle through all classes gives every class a distinct successor.
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let mut succ = vec![0; k];
            for i in 0..k {
                succ[order[i]] = order[(i + 1) % k];
            }
            (0..k)
                .map(|c| {
                    let others = k.saturating_sub(2);
                    (0..k)
                        .map(|j| {
                            if j == c {
                                0.0
                            } else if j == succ[c] {
                                if others == 0 {
                                    1.0
                                } else {
                                    g.successor_prob
                                }
                            } else {
                                (1.0 - g.successor_prob) / others as f64
                            }
                        })
                        .collect()
                })
                .collect()
        }
    };
    let mut mean_frames = spread(k, 1.0 - g.duration_spread, 1.0 + g.duration_spread);
    mean_frames.shuffle(&mut rng);
    for m in &mut mean_frames {
        *m *= g.mean_segment_frames;
    }
    let mut coupling = spread(k, -1.0, 1.0);
    coupling.shuffle(&mut rng);
    let centroids = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..g.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    Structure {
        transition,
        mean_frames,
        coupling,
        centroids,
    }
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Samples `n_videos` videos from the grammar. Deterministic in `(grammar, seed)`.
pub fn generate_corpus(
    vocab: &ActionVocabulary,
    grammar: &GrammarConfig,
    n_videos: usize,
    seed: u64,
) -> Result<Vec<VideoSample>, DatasetError> {
    grammar.validate()?;
    if vocab.len() != grammar.n_classes {
        return Err(DatasetError::Grammar(format!(
            "vocabulary has {} classes, grammar has {}",
            vocab.len(),
            grammar.n_classes
        )));
    }
    let s = build_structure(grammar);
    let k = grammar.n_classes;
    let dim = grammar.effective_feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::with_capacity(n_videos);
    for v in 0..n_videos {
        let n_seg = rng.gen_range(grammar.min_segments..=grammar.max_segments);
        let mut labels = Vec::new();
        let mut class = rng.gen_range(0..k);
        let mut prev: Option<usize> = None;
        for seg in 0..n_seg {
            if seg > 0 {
                prev = Some(class);
                class = sample_row(&s.transition[class], &mut rng);
            }
            let mut mean = s.mean_frames[class];
            if let Some(p) = prev {
                mean *= 1.0 + grammar.duration_coupling * s.coupling[p];
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            let len = (mean * (1.0 + grammar.duration_std * z)).clamp(0.3 * mean, 2.0 * mean);
            let len = (len.round() as usize).max(1);
            labels.extend(std::iter::repeat_n(class, len));
        }
        let mut data = Vec::with_capacity(labels.len() * dim);
        for &c in &labels {
            if grammar.oracle_features {
                data.extend((0..k).map(|j| if j == c { 1.0 } else { 0.0 }));
            } else {
                for d in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(s.centroids[c][d] + grammar.noise_std * z);
                }
            }
        }
        corpus.push(VideoSample {
            id: format!("vid_{v:04}"),
            features: Features::new(labels.len(), dim, data),
            frame_labels: labels,
            fps: grammar.fps,
        });
    }
    Ok(corpus)
}
