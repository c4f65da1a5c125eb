//! Experiment configuration and end-to-end runs: corpus preparation,
//! training, evaluation grids, sweeps and exports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{anticipate, BackboneConfig, DurationMode};
use crate::dataset::{
    generate_corpus, load_manifest, segments_from_labels, split_full_weak, train_test_split, window, write_split,
    ActionVocabulary, DatasetError, GrammarConfig, SplitRecord, SplitSpec, VideoSample, WeakSample, WindowedSample,
    window_id,
};
use crate::derive_seed;
use crate::evaluation::{evaluate, mean_std, predict_frames, EvalError, MetricReport};
use crate::model::{save_checkpoint, CheckpointError, Framework, ModelConfig};
use crate::refinement::RefinerInit;
use crate::training::{train, write_run_files, RunOptions, RunRecord, TrainConfig, TrainError, TrainMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {path}: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Capability(String),
    #[error("unknown video {0}")]
    UnknownVideo(String),
}

impl ExperimentError {
    fn config(path: &str, msg: impl Into<String>) -> Self {
        ExperimentError::Config {
            path: path.to_string(),
            msg: msg.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config { .. }
                | ExperimentError::Capability(_)
                | ExperimentError::UnknownVideo(_)
                | ExperimentError::Dataset(
                    DatasetError::Config(_)
                        | DatasetError::Grammar(_)
                        | DatasetError::Vocabulary(_)
                        | DatasetError::Validation { .. }
                        | DatasetError::Parse { .. }
                )
                | ExperimentError::Train(TrainError::Config(_))
        )
    }

    pub fn is_numeric(&self) -> bool {
        match self {
            ExperimentError::Train(t) => t.is_numeric(),
            ExperimentError::Eval(EvalError::Numeric(_)) => true,
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            ExperimentError::Io { .. }
                | ExperimentError::Dataset(DatasetError::Io { .. })
                | ExperimentError::Checkpoint(CheckpointError::Io { .. })
                | ExperimentError::Train(TrainError::Checkpoint(CheckpointError::Io { .. }))
                | ExperimentError::Eval(EvalError::Io { .. })
        )
    }
}

fn io_err(path: &Path, e: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        grammar: GrammarConfig,
        n_videos: usize,
    },
    /// Feature files listed in a manifest; relative paths resolve against the config file.
    Manifest { path: PathBuf, n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetBlock {
    pub source: DataSource,
    pub test_fraction: f64,
    pub full_fraction: f64,
    pub observed_fraction: f64,
    pub predicted_fraction: f64,
    /// Further observation fractions at which fully-labelled training videos
    /// are also windowed. Weak videos keep the single window.
    pub extra_full_observed: Vec<f64>,
}

impl Default for DatasetBlock {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                grammar: GrammarConfig::default(),
                n_videos: 200,
            },
            test_fraction: 0.2,
            full_fraction: 0.15,
            observed_fraction: 0.3,
            predicted_fraction: 0.2,
            extra_full_observed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub hidden_dim: usize,
    pub encoding_dim: usize,
    pub embed_dim: usize,
    pub max_steps: usize,
    pub attention: bool,
    pub duration_mode: DurationMode,
    pub refiner_init: RefinerInit,
    pub refiner_jitter: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            hidden_dim: 512,
            encoding_dim: 512,
            embed_dim: 32,
            max_steps: 12,
            attention: true,
            duration_mode: DurationMode::Softplus,
            refiner_init: RefinerInit::default(),
            refiner_jitter: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationBlock {
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
    pub n_seeds: usize,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        Self {
            observed: vec![0.2, 0.3],
            predicted: vec![0.1, 0.2, 0.3, 0.5],
            n_seeds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            dataset: DatasetBlock::default(),
            model: ModelBlock::default(),
            training: TrainConfig::default(),
            evaluation: EvaluationBlock::default(),
        }
    }
}

fn check_fraction(path: &str, v: f64, lo_open: bool, hi_closed: bool) -> Result<(), ExperimentError> {
    let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
    let hi_ok = if hi_closed { v <= 1.0 } else { v < 1.0 };
    if lo_ok && hi_ok {
        Ok(())
    } else {
        Err(ExperimentError::config(path, format!("{v} is out of range")))
    }
}

impl ExperimentConfig {
    /// Parses and validates; `base_dir` anchors relative manifest paths.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ExperimentError::config(&path, e.into_inner().to_string())
        })?;
        if let DataSource::Manifest { path, .. } = &mut cfg.dataset.source {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn n_classes(&self) -> usize {
        match &self.dataset.source {
            DataSource::Synthetic { grammar, .. } => grammar.n_classes,
            DataSource::Manifest { n_classes, .. } => *n_classes,
        }
    }

    /// Rejects every setting that would fail later in a run.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        let d = &self.dataset;
        match &d.source {
            DataSource::Synthetic { grammar, n_videos } => {
                grammar
                    .validate()
                    .map_err(|e| ExperimentError::config("dataset.source.grammar", e.to_string()))?;
                if *n_videos < 2 {
                    return Err(ExperimentError::config("dataset.source.n_videos", "need at least 2 videos"));
                }
            }
            DataSource::Manifest { n_classes, .. } => {
                if *n_classes < 2 {
                    return Err(ExperimentError::config("dataset.source.n_classes", "need at least 2 classes"));
                }
            }
        }
        check_fraction("dataset.test_fraction", d.test_fraction, true, false)?;
        check_fraction("dataset.full_fraction", d.full_fraction, true, true)?;
        check_fraction("dataset.observed_fraction", d.observed_fraction, true, false)?;
        check_fraction("dataset.predicted_fraction", d.predicted_fraction, true, true)?;
        if d.observed_fraction + d.predicted_fraction > 1.0 + 1e-9 {
            return Err(ExperimentError::config(
                "dataset.predicted_fraction",
                "observed_fraction + predicted_fraction exceeds 1",
            ));
        }
        for (i, &x) in d.extra_full_observed.iter().enumerate() {
            let path = format!("dataset.extra_full_observed[{i}]");
            check_fraction(&path, x, true, false)?;
            if x + d.predicted_fraction > 1.0 + 1e-9 {
                return Err(ExperimentError::config(&path, "observed + predicted_fraction exceeds 1"));
            }
        }

        if d.full_fraction >= 1.0 && self.training.mode != TrainMode::Baseline1 && self.training.mode != TrainMode::Baseline2
        {
            return Err(ExperimentError::config(
                "dataset.full_fraction",
                "a weakly-labelled set is required unless training a baseline on full labels",
            ));
        }
        self.backbone_config(1)
            .validate()
            .map_err(|m| ExperimentError::config("model", m))?;
        if !(self.model.refiner_jitter >= 0.0) {
            return Err(ExperimentError::config("model.refiner_jitter", "must be >= 0"));
        }
        if let RefinerInit::Geometric { pseudo_weight } = self.model.refiner_init {
            if !(0.0..=1.0).contains(&pseudo_weight) {
                return Err(ExperimentError::config("model.refiner_init.pseudo_weight", "must be in [0,1]"));
            }
        }
        self.training
            .validate()
            .map_err(|e| ExperimentError::config("training", e.to_string()))?;
        for (i, x) in self.evaluation.observed.iter().enumerate() {
            check_fraction(&format!("evaluation.observed[{i}]"), *x, true, false)?;
            for (j, y) in self.evaluation.predicted.iter().enumerate() {
                if x + y > 1.0 + 1e-9 {
                    return Err(ExperimentError::config(
                        &format!("evaluation.predicted[{j}]"),
                        format!("observed {x} + predicted {y} exceeds 1"),
                    ));
                }
            }
        }
        for (j, y) in self.evaluation.predicted.iter().enumerate() {
            check_fraction(&format!("evaluation.predicted[{j}]"), *y, true, true)?;
        }
        Ok(())
    }

    /// Backbone configuration for features of width `feature_dim`.
    pub fn backbone_config(&self, feature_dim: usize) -> BackboneConfig {
        let m = &self.model;
        BackboneConfig {
            feature_dim,
            hidden_dim: m.hidden_dim,
            encoding_dim: m.encoding_dim,
            embed_dim: m.embed_dim,
            n_classes: self.n_classes(),
            max_steps: m.max_steps,
            attention: m.attention,
            duration_mode: m.duration_mode,
        }
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(feature_dim),
            refiner_init: self.model.refiner_init,
            refiner_jitter: self.model.refiner_jitter,
        }
    }

    pub fn with_mode(&self, mode: TrainMode) -> Self {
        let mut c = self.clone();
        c.training.mode = mode;
        c
    }
}

/// Loads or generates the corpus for `seed`. Synthetic videos vary with the
/// seed; the grammar structure is fixed by its own `structure_seed`.
pub fn load_corpus(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<VideoSample>, ExperimentError> {
    let k = cfg.n_classes();
    let corpus = match &cfg.dataset.source {
        DataSource::Synthetic { grammar, n_videos } => {
            let vocab = ActionVocabulary::numbered(k)?;
            generate_corpus(&vocab, grammar, *n_videos, derive_seed(seed, "corpus"))?
        }
        DataSource::Manifest { path, .. } => load_manifest(path)?,
    };
    let Some(first) = corpus.first() else {
        return Err(ExperimentError::config("dataset.source", "corpus is empty"));
    };
    let dim = first.features.dim;
    for v in &corpus {
        if v.features.dim != dim {
            return Err(ExperimentError::config(
                "dataset.source",
                format!("video {} has feature dim {}, expected {dim}", v.id, v.features.dim),
            ));
        }
        if let Some(c) = v.frame_labels.iter().find(|&&c| c >= k) {
            return Err(ExperimentError::config(
                "dataset.source.n_classes",
                format!("video {} has label {c} but n_classes is {k}", v.id),
            ));
        }
    }
    Ok(corpus)
}

/// Train/test partition and the 𝓕/𝓦 split of the training part.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
    pub full: Vec<WindowedSample>,
    pub weak: Vec<WeakSample>,
    pub split: SplitRecord,
    pub feature_dim: usize,
}

impl Prepared {
    /// Test windows at `(x, y)`; degenerate windows are skipped.
    pub fn test_windows(&self, x: f64, y: f64) -> Result<Vec<WindowedSample>, ExperimentError> {
        windows(&self.test, x, y)
    }

    /// Windows of the fully-labelled training videos at `(x, y)`.
    pub fn full_windows(&self, x: f64, y: f64) -> Result<Vec<WindowedSample>, ExperimentError> {
        let ids: std::collections::BTreeSet<&str> = self.split.full_ids.iter().map(String::as_str).collect();
        let videos: Vec<VideoSample> = self.train.iter().filter(|v| ids.contains(v.id.as_str())).cloned().collect();
        windows(&videos, x, y)
    }
}

pub fn windows(videos: &[VideoSample], x: f64, y: f64) -> Result<Vec<WindowedSample>, ExperimentError> {
    let mut out = Vec::with_capacity(videos.len());
    for v in videos {
        match window(v, x, y) {
            Ok(w) => out.push(w),
            Err(DatasetError::Degenerate { .. }) => log::warn!("skipping degenerate window of {}", v.id),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Appends the `extra_full_observed` windows of every video in `full`.
fn with_extra_windows(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    mut full: Vec<WindowedSample>,
) -> Result<Vec<WindowedSample>, ExperimentError> {
    let d = &cfg.dataset;
    if d.extra_full_observed.is_empty() {
        return Ok(full);
    }
    let ids: std::collections::BTreeSet<&str> = full.iter().map(|s| s.id.as_str()).collect();
    let videos: Vec<VideoSample> = prep.train.iter().filter(|v| ids.contains(v.id.as_str())).cloned().collect();
    for &x in &d.extra_full_observed {
        for mut w in windows(&videos, x, d.predicted_fraction)? {
            w.id = window_id(&w.id, x);
            full.push(w);
        }
    }
    Ok(full)
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared, ExperimentError> {
    let corpus = load_corpus(cfg, seed)?;
    let d = &cfg.dataset;
    let (train, test) = train_test_split(&corpus, d.test_fraction, derive_seed(seed, "test_split"))?;
    let spec = SplitSpec {
        full_fraction: d.full_fraction,
        seed: derive_seed(seed, "full_weak_split"),
        observed_fraction: d.observed_fraction,
        predicted_fraction: d.predicted_fraction,
    };
    let (full, weak) = if d.full_fraction >= 1.0 {
        (windows(&train, d.observed_fraction, d.predicted_fraction)?, Vec::new())
    } else {
        split_full_weak(&train, &spec)?
    };
    let split = SplitRecord {
        seed: spec.seed,
        full_ids: full.iter().map(|s| s.id.clone()).collect(),
        weak_ids: weak.iter().map(|s| s.id.clone()).collect(),
    };
    let feature_dim = corpus[0].features.dim;
    Ok(Prepared {
        train,
        test,
        full,
        weak,
        split,
        feature_dim,
    })
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub framework: Framework,
    pub metrics: MetricReport,
}

/// Trains `cfg.training.mode` for `seed`, evaluates on the test split at the
/// dataset window, and writes the run directory when `out_dir` is given.
pub fn run(cfg: &ExperimentConfig, seed: u64, out_dir: Option<&Path>) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let prep = prepare(cfg, seed)?;
    run_prepared(cfg, seed, &prep, out_dir)
}

pub fn run_prepared(
    cfg: &ExperimentConfig,
    seed: u64,
    prep: &Prepared,
    out_dir: Option<&Path>,
) -> Result<RunOutcome, ExperimentError> {
    let mut fw = Framework::new(cfg.model_config(prep.feature_dim), derive_seed(seed, "init"))
        .map_err(TrainError::from)?;
    let header = serde_json::json!({ "config": cfg, "seed": seed });
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let p = dir.join("config.json");
        std::fs::write(&p, cfg.to_json()).map_err(|e| io_err(&p, e))?;
        write_split(&dir.join("split.json"), &prep.split)?;
    }
    let (full, weak): (Vec<WindowedSample>, &[WeakSample]) = match cfg.training.mode {
        // Every training video, fully labelled.
        TrainMode::Baseline1 => (windows(&prep.train, cfg.dataset.observed_fraction, cfg.dataset.predicted_fraction)?, &[]),
        _ => (prep.full.clone(), &prep.weak),
    };
    let full = with_extra_windows(cfg, prep, full)?;
    let opts = RunOptions {
        out_dir: out_dir.map(Path::to_path_buf),
        header,
    };
    let mut record = train(&mut fw, &full, weak, &cfg.training, seed, &opts)?;
    let test = prep.test_windows(cfg.dataset.observed_fraction, cfg.dataset.predicted_fraction)?;
    let mut metrics = evaluate(&fw.primary, &fw.store, &test, seed)?;
    metrics.config_hash = Some(cfg.hash());
    record.metrics = Some(metrics.clone());
    if let Some(dir) = out_dir {
        write_run_files(dir, &record).map_err(|e| io_err(dir, e))?;
        metrics.write_json(&dir.join("metrics.json"))?;
    }
    Ok(RunOutcome {
        record,
        framework: fw,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub observed: f64,
    pub predicted: f64,
    pub moc: f64,
    pub per_step_accuracy: Vec<f64>,
    pub n_videos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub seed: u64,
    pub cells: Vec<GridCell>,
}

impl EvalTable {
    /// One row per observed fraction, one MoC column per predicted fraction.
    pub fn to_markdown(&self) -> String {
        let mut ys: Vec<f64> = Vec::new();
        let mut xs: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !ys.contains(&c.predicted) {
                ys.push(c.predicted);
            }
            if !xs.contains(&c.observed) {
                xs.push(c.observed);
            }
        }
        let mut s = String::from("| observed |");
        for y in &ys {
            let _ = write!(s, " {:.0}% |", y * 100.0);
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(ys.len()));
        s.push('\n');
        for x in &xs {
            let _ = write!(s, "| {:.0}% |", x * 100.0);
            for y in &ys {
                match self.cells.iter().find(|c| c.observed == *x && c.predicted == *y) {
                    Some(c) => {
                        let _ = write!(s, " {:.4} |", c.moc);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// MoC of the primary for every `(x, y)` pair.
pub fn eval_grid(
    fw: &Framework,
    videos: &[VideoSample],
    observed: &[f64],
    predicted: &[f64],
    seed: u64,
) -> Result<EvalTable, ExperimentError> {
    let mut cells = Vec::new();
    for &x in observed {
        for &y in predicted {
            let w = windows(videos, x, y)?;
            let r = evaluate(&fw.primary, &fw.store, &w, seed)?;
            cells.push(GridCell {
                observed: x,
                predicted: y,
                moc: r.moc,
                per_step_accuracy: r.per_step_accuracy,
                n_videos: r.n_videos,
            });
        }
    }
    Ok(EvalTable { seed, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSweepRow {
    pub fraction: f64,
    pub mode: TrainMode,
    pub mean_moc: f64,
    pub mocs: Vec<f64>,
}

/// Trains the configured mode at each fully-labelled fraction, plus the
/// fully-supervised reference at fraction 1.0.
pub fn sweep_split(cfg: &ExperimentConfig, fractions: &[f64], seeds: &[u64]) -> Result<Vec<SplitSweepRow>, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::config("evaluation.n_seeds", "need at least one seed"));
    }
    let mut rows = Vec::new();
    let mut jobs: Vec<(f64, ExperimentConfig)> = Vec::new();
    for (i, &f) in fractions.iter().enumerate() {
        if !(f > 0.0 && f < 1.0) {
            return Err(ExperimentError::config(&format!("fractions[{i}]"), format!("{f} is not in (0,1)")));
        }
        let mut c = cfg.clone();
        c.dataset.full_fraction = f;
        jobs.push((f, c));
    }
    let mut reference = cfg.with_mode(TrainMode::Baseline1);
    reference.dataset.full_fraction = 1.0;
    jobs.push((1.0, reference));
    for (f, c) in jobs {
        c.validate()?;
        let mut mocs = Vec::with_capacity(seeds.len());
        for &s in seeds {
            mocs.push(run(&c, s, None)?.metrics.moc);
        }
        let mean_moc = mocs.iter().sum::<f64>() / mocs.len() as f64;
        rows.push(SplitSweepRow {
            fraction: f,
            mode: c.training.mode,
            mean_moc,
            mocs,
        });
    }
    Ok(rows)
}

pub fn split_sweep_csv(rows: &[SplitSweepRow]) -> String {
    let mut s = String::from("fraction,mode,mean_moc,mocs\n");
    for r in rows {
        let mocs: Vec<String> = r.mocs.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(s, "{},{},{},{}", r.fraction, r.mode.name(), r.mean_moc, mocs.join(";"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub rows: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl SeedSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,moc\n");
        for (seed, moc) in &self.rows {
            let _ = writeln!(s, "{seed},{moc}");
        }
        s
    }
}

/// One full run per seed; MoC mean and sample standard deviation.
pub fn sweep_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<SeedSweep, ExperimentError> {
    if seeds.len() < 2 {
        return Err(EvalError::TooFewSeeds(seeds.len()).into());
    }
    let mut rows = Vec::with_capacity(seeds.len());
    for &s in seeds {
        rows.push((s, run(cfg, s, None)?.metrics.moc));
    }
    let values: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mean, std) = mean_std(&values)?;
    Ok(SeedSweep { rows, mean, std })
}

/// Attention of every predicted step over the observed frames (`M × T`) and
/// the same weights averaged within each observed ground-truth segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub frames: Vec<Vec<f64>>,
    pub pooled: Vec<Vec<f64>>,
    pub segment_classes: Vec<usize>,
    pub predicted_classes: Vec<usize>,
}

impl AttentionExport {
    pub fn frames_csv(&self) -> String {
        matrix_csv("frame", &self.frames)
    }

    pub fn pooled_csv(&self) -> String {
        matrix_csv("segment", &self.pooled)
    }
}

fn matrix_csv(col: &str, rows: &[Vec<f64>]) -> String {
    let width = rows.first().map_or(0, Vec::len);
    let mut s = String::from("step");
    for j in 0..width {
        let _ = write!(s, ",{col}_{j}");
    }
    s.push('\n');
    for (m, r) in rows.iter().enumerate() {
        let _ = write!(s, "{}", m + 1);
        for v in r {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn find_video<'v>(videos: &'v [VideoSample], id: &str) -> Result<&'v VideoSample, ExperimentError> {
    videos
        .iter()
        .find(|v| v.id == id)
        .ok_or_else(|| ExperimentError::UnknownVideo(id.to_string()))
}

pub fn export_attention(fw: &Framework, video: &VideoSample, x: f64, y: f64) -> Result<AttentionExport, ExperimentError> {
    if !fw.primary.config.attention {
        return Err(ExperimentError::Capability(
            "checkpoint was trained without duration attention".into(),
        ));
    }
    let w = window(video, x, y)?;
    let seq = anticipate(&fw.primary, &fw.store, &w.observed, None, w.horizon_length()).map_err(EvalError::from)?;
    let t_obs = w.observed.frames;
    let labels = &video.frame_labels[..t_obs];
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some((cls, _, end)) if *cls == c => *end = t + 1,
            _ => runs.push((c, t, t + 1)),
        }
    }
    let frames: Vec<Vec<f64>> = seq
        .steps
        .iter()
        .map(|s| s.attn_weights.clone().unwrap_or_default())
        .collect();
    let pooled = frames
        .iter()
        .map(|row| {
            runs.iter()
                .map(|(_, a, b)| row[*a..*b].iter().sum::<f64>() / (b - a) as f64)
                .collect()
        })
        .collect();
    Ok(AttentionExport {
        frames,
        pooled,
        segment_classes: runs.iter().map(|r| r.0).collect(),
        predicted_classes: seq.steps.iter().map(|s| s.argmax()).collect(),
    })
}

/// Ground-truth and predicted segments over `[x, x+y]` as
/// `track,start_fraction,end_fraction,class` rows.
pub fn export_segments(fw: &Framework, video: &VideoSample, x: f64, y: f64) -> Result<String, ExperimentError> {
    let w = window(video, x, y)?;
    let total = w.total_frames as f64;
    let start = w.observed.frames as f64 / total;
    let mut s = String::from("track,start_fraction,end_fraction,class\n");
    let mut t = start;
    for seg in segments_from_labels(&video.frame_labels[w.observed.frames..w.observed.frames + w.horizon_frames], w.total_frames) {
        let _ = writeln!(s, "gt,{},{},{}", t, t + seg.duration, seg.class_id);
        t += seg.duration;
    }
    let (seq, _) = predict_frames(&fw.primary, &fw.store, &w)?;
    let mut t = start;
    for st in seq.steps.iter().filter(|s| s.duration > 0.0) {
        let _ = writeln!(s, "pred,{},{},{}", t, t + st.duration, st.argmax());
        t += st.duration;
    }
    Ok(s)
}

/// Saves a framework with the experiment header.
pub fn save_framework(path: &Path, cfg: &ExperimentConfig, seed: u64, fw: &Framework) -> Result<(), ExperimentError> {
    save_checkpoint(path, serde_json::json!({ "config": cfg, "seed": seed }), fw)?;
    Ok(())
}

/// Recovers the experiment config stored in a checkpoint header.
pub fn checkpoint_config(header: &serde_json::Value) -> Result<(ExperimentConfig, u64), ExperimentError> {
    let cfg = header
        .get("config")
        .cloned()
        .ok_or_else(|| ExperimentError::config("checkpoint.header", "missing config"))?;
    let cfg: ExperimentConfig =
        serde_json::from_value(cfg).map_err(|e| ExperimentError::config("checkpoint.header.config", e.to_string()))?;
    let seed = header.get("seed").and_then(|s| s.as_u64()).unwrap_or(cfg.seed);
    Ok((cfg, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.dataset.source = DataSource::Synthetic {
            grammar: GrammarConfig {
                n_classes: 4,
                feature_dim: 4,
                min_segments: 4,
                max_segments: 5,
                mean_segment_frames: 6.0,
                ..Default::default()
            },
            n_videos: 30,
        };
        c.dataset.full_fraction = 0.3;
        c.model = ModelBlock {
            hidden_dim: 6,
            encoding_dim: 6,
            embed_dim: 3,
            max_steps: 4,
            ..Default::default()
        };
        c.training.n1 = Some(1);
        c.training.n2 = Some(1);
        c.training.n3 = Some(1);
        c.training.batch_size = 8;
        c
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = ExperimentConfig::from_json(
            r#"{"schema_version": 1, "training": {"batch_sise": 3}}"#,
            Path::new("."),
        )
        .unwrap_err();
        let ExperimentError::Config { path, msg } = err else { panic!("{err}") };
        assert_eq!(path, "training.batch_sise");
        assert!(msg.contains("unknown field"), "{msg}");
    }

    #[test]
    fn semantic_validation_names_the_field() {
        let mut c = tiny();
        c.dataset.observed_fraction = 0.9;
        let err = c.validate().unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref path, .. } if path == "dataset.predicted_fraction"));
        let mut c = tiny();
        c.schema_version = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn extra_windows_cover_only_full_videos() {
        let mut c = tiny();
        c.dataset.extra_full_observed = vec![0.2, 0.5];
        let prep = prepare(&c, 0).unwrap();
        let out = with_extra_windows(&c, &prep, prep.full.clone()).unwrap();
        assert_eq!(out[..prep.full.len()], prep.full[..]);
        let full_videos: Vec<VideoSample> =
            prep.train.iter().filter(|v| prep.full.iter().any(|s| s.id == v.id)).cloned().collect();
        let mut expect = Vec::new();
        for x in [0.2, 0.5] {
            for mut w in windows(&full_videos, x, c.dataset.predicted_fraction).unwrap() {
                w.id = format!("{}@{x}", w.id);
                expect.push(w);
            }
        }
        assert!(!expect.is_empty());
        assert_eq!(out[prep.full.len()..], expect[..]);
        c.dataset.extra_full_observed = vec![0.9];
        let err = c.validate().unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref path, .. } if path == "dataset.extra_full_observed[0]"));
    }

    #[test]
    fn config_round_trip() {
        let c = tiny();
        let back = ExperimentConfig::from_json(&c.to_json(), Path::new(".")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn run_writes_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&tiny(), 0, Some(dir.path())).unwrap();
        for f in ["config.json", "losses.csv", "metrics.json", "split.json", "access_log.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        for p in 1..=3 {
            assert!(dir.path().join(format!("checkpoints/phase{p}.ckpt")).exists());
        }
        assert!((0.0..=1.0).contains(&out.metrics.moc));
    }

    #[test]
    fn grid_has_one_cell_per_pair() {
        let c = tiny();
        let prep = prepare(&c, 0).unwrap();
        let fw = Framework::new(c.model_config(prep.feature_dim), 0).unwrap();
        let t = eval_grid(&fw, &prep.test, &[0.2, 0.3], &[0.1, 0.2, 0.3, 0.5], 0).unwrap();
        assert_eq!(t.cells.len(), 8);
        assert_eq!(t.to_markdown().lines().count(), 4);
    }

    #[test]
    fn attention_export_rows_are_distributions() {
        let c = tiny();
        let prep = prepare(&c, 0).unwrap();
        let fw = Framework::new(c.model_config(prep.feature_dim), 0).unwrap();
        let v = &prep.test[0];
        let a = export_attention(&fw, v, 0.3, 0.2).unwrap();
        let t = window(v, 0.3, 0.2).unwrap().observed.frames;
        for r in &a.frames {
            assert_eq!(r.len(), t);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut no_attn = c.clone();
        no_attn.model.attention = false;
        let fw = Framework::new(no_attn.model_config(prep.feature_dim), 0).unwrap();
        assert!(matches!(export_attention(&fw, v, 0.3, 0.2), Err(ExperimentError::Capability(_))));
    }

    #[test]
    fn segment_export_covers_the_window() {
        let c = tiny();
        let prep = prepare(&c, 0).unwrap();
        let fw = Framework::new(c.model_config(prep.feature_dim), 0).unwrap();
        let v = &prep.test[1];
        let csv = export_segments(&fw, v, 0.3, 0.5).unwrap();
        let w = window(v, 0.3, 0.5).unwrap();
        let lo = w.observed.frames as f64 / w.total_frames as f64;
        let hi = lo + w.horizon_length();
        let pred: Vec<Vec<&str>> = csv.lines().filter(|l| l.starts_with("pred")).map(|l| l.split(',').collect()).collect();
        assert!((pred[0][1].parse::<f64>().unwrap() - lo).abs() < 1e-12);
        assert!((pred.last().unwrap()[2].parse::<f64>().unwrap() - hi).abs() < 1e-9);
        assert!(matches!(find_video(&prep.test, "nope"), Err(ExperimentError::UnknownVideo(_))));
    }
}
