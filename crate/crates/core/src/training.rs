//! Training procedures: linear and adaptive refinement, pseudo-label
//! training without refinement, and the three supervised baselines.
//!
//! Phases:
//!
//! | mode        | phase 1               | phase 2                      | phase 3                     |
//! |-------------|-----------------------|------------------------------|-----------------------------|
//! | linear      | cond on 𝓕             | prim on 𝓕 + refined 𝓦        |                             |
//! | pseudo      | cond on 𝓕             | prim on 𝓕 + raw pseudo 𝓦     |                             |
//! | adaptive    | cond on part of 𝓕     | prim + refiner on 𝓕          | prim + refiner on 𝓕 and 𝓦   |
//! | baseline1/2 | prim on 𝓕             |                              |                             |
//! | baseline3   | prim on 𝓕 + c₁ on 𝓦   |                              |                             |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{AnticipatedSequence, StepOutput, Stop, StopReason};
use crate::dataset::{video_id, WeakSample, WindowedSample};
use crate::derive_seed;
use crate::diffcore::{Bound, DiffError, Grads, ParamStore, Parameter, SgdMomentum, Tape};
use crate::evaluation::{evaluate, EvalError, MetricReport};
use crate::losses::{composite, FullItem, LossBreakdown, LossError, LossTerm, SetScale, WeakItem};
use crate::model::{save_checkpoint, CheckpointError, Framework, Part};
use crate::refinement::{adaptive_refine, linear_refine, pseudo_label, RefineError, RefineSchedule, RefinedStep};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Numeric(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    /// True for failures caused by non-finite or otherwise broken numerics.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Numeric(_)
                | TrainError::Loss(LossError::Numeric(_))
                | TrainError::Refine(RefineError::Numeric(_))
                | TrainError::Eval(EvalError::Numeric(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Linear,
    Adaptive,
    /// Pseudo-labels used as targets without refinement.
    Pseudo,
    Baseline1,
    Baseline2,
    Baseline3,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Linear => "linear",
            TrainMode::Adaptive => "adaptive",
            TrainMode::Pseudo => "pseudo",
            TrainMode::Baseline1 => "baseline1",
            TrainMode::Baseline2 => "baseline2",
            TrainMode::Baseline3 => "baseline3",
        }
    }

    pub fn baseline(kind: u8) -> Result<Self, TrainError> {
        match kind {
            1 => Ok(TrainMode::Baseline1),
            2 => Ok(TrainMode::Baseline2),
            3 => Ok(TrainMode::Baseline3),
            k => Err(TrainError::Config(format!("baseline kind must be 1, 2 or 3, got {k}"))),
        }
    }

    pub fn uses_conditional(self) -> bool {
        matches!(self, TrainMode::Linear | TrainMode::Adaptive | TrainMode::Pseudo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Epoch counts; unset values take the mode's defaults.
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub n3: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub schedule: RefineSchedule,
    pub cond_train_fraction: f64,
    /// Share of 𝓕 held out for best-checkpoint selection; 0 disables it.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Adaptive,
            n1: None,
            n2: None,
            n3: None,
            batch_size: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_norm: Some(5.0),
            schedule: RefineSchedule::default(),
            cond_train_fraction: 0.5,
            validation_fraction: 0.1,
        }
    }
}

/// Resolved epoch counts per phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Epochs {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

impl TrainConfig {
    pub fn epochs(&self) -> Epochs {
        let (d1, d2, d3) = match self.mode {
            TrainMode::Linear | TrainMode::Pseudo => (20, 25, 0),
            TrainMode::Adaptive => (15, 20, 20),
            // Baselines train the primary for as long as the adaptive model does.
            _ => (0, 20, 20),
        };
        let e = Epochs {
            n1: self.n1.unwrap_or(d1),
            n2: self.n2.unwrap_or(d2),
            n3: self.n3.unwrap_or(d3),
        };
        match self.mode {
            TrainMode::Linear | TrainMode::Pseudo => Epochs { n3: 0, ..e },
            TrainMode::Baseline1 | TrainMode::Baseline2 | TrainMode::Baseline3 => Epochs {
                n1: e.n2 + e.n3,
                n2: 0,
                n3: 0,
            },
            TrainMode::Adaptive => e,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if !(self.cond_train_fraction > 0.0 && self.cond_train_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "cond_train_fraction must be in (0,1], got {}",
                self.cond_train_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::Config(format!(
                "validation_fraction must be in [0,1), got {}",
                self.validation_fraction
            )));
        }
        self.schedule.validate()?;
        Ok(())
    }
}

/// Which sample ids had which label fields read during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub reads: BTreeMap<String, BTreeSet<String>>,
}

impl AccessLog {
    fn touch(&mut self, id: &str, field: &str) {
        self.reads.entry(id.to_string()).or_default().insert(field.to_string());
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.reads.keys().cloned().collect()
    }

    pub fn fields(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.reads.get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartHashes {
    pub primary: String,
    pub conditional: String,
    pub refiner: String,
}

impl PartHashes {
    pub fn of(fw: &Framework) -> Self {
        Self {
            primary: fw.hash(Part::Primary),
            conditional: fw.hash(Part::Conditional),
            refiner: fw.hash(Part::Refiner),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: u8,
    pub name: String,
    pub epochs: usize,
    pub skipped: bool,
    pub before: PartHashes,
    pub after: PartHashes,
}

/// Step-1 audit of every pseudo-label generated for the weak set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoAudit {
    pub checked: usize,
    pub mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: TrainMode,
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub phases: Vec<PhaseRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub pseudo_audit: PseudoAudit,
    pub access_log: AccessLog,
    pub n_full: usize,
    pub n_weak: usize,
    pub n_validation: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_validation_moc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricReport>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// One row per epoch: phase, epoch, alpha and every loss term.
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("phase,epoch,alpha,total");
        for t in LossTerm::ALL {
            s.push(',');
            s.push_str(t.name());
        }
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{},", e.phase, e.epoch);
            if let Some(a) = e.alpha {
                let _ = write!(s, "{a}");
            }
            let _ = write!(s, ",{}", e.losses.total);
            for t in LossTerm::ALL {
                s.push(',');
                if let Some(v) = e.losses.get(t) {
                    let _ = write!(s, "{v}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn phase_losses(&self, phase: u8) -> Vec<&EpochRecord> {
        self.epochs.iter().filter(|e| e.phase == phase).collect()
    }
}

/// Primary rollout, refined targets and attention targets of one F sample.
type FullRoll<'a> = (Vec<StepOutput>, Option<Vec<RefinedStep>>, Option<Vec<Vec<f64>>>, &'a WindowedSample);
/// Primary rollout, pseudo-label and attention targets of one W sample.
type WeakRoll<'a> = (Vec<StepOutput>, Option<AnticipatedSequence>, Option<Vec<Vec<f64>>>, &'a WeakSample);

/// Where checkpoints go and what header they carry.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub header: serde_json::Value,
}

/// Pseudo-label of one sample: the conditional rollout with step 1 substituted.
type PseudoCache = BTreeMap<String, AnticipatedSequence>;

enum WeakTarget {
    None,
    Linear(f64),
    Raw,
    Adaptive,
}

struct Trainer<'a> {
    fw: &'a mut Framework,
    cfg: &'a TrainConfig,
    seed: u64,
    record: RunRecord,
    opts: &'a RunOptions,
    validation: Vec<WindowedSample>,
    best_moc: Option<f64>,
}

fn part_filter(parts: &'static [Part]) -> impl Fn(&Parameter) -> bool {
    move |p: &Parameter| parts.iter().any(|part| p.name.starts_with(&part.prefix()))
}

/// Updates each part separately so norm clipping is applied per sub-model.
fn step_parts(opt: &mut SgdMomentum, store: &mut ParamStore, grads: &Grads, parts: &[Part]) {
    for part in parts {
        let prefix = part.prefix();
        opt.step(store, grads, |p: &Parameter| p.name.starts_with(&prefix));
    }
}

/// Assigns shuffled 𝓕 items then shuffled 𝓦 items round-robin to batches so
/// every batch holds a proportional share of both.
fn stratified_batches(n_full: usize, n_weak: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Item>> {
    let total = n_full + n_weak;
    if total == 0 {
        return Vec::new();
    }
    let nb = total.div_ceil(batch);
    let mut f: Vec<usize> = (0..n_full).collect();
    let mut w: Vec<usize> = (0..n_weak).collect();
    f.shuffle(rng);
    w.shuffle(rng);
    let mut batches = vec![Vec::new(); nb];
    let items = f.into_iter().map(Item::Full).chain(w.into_iter().map(Item::Weak));
    for (k, item) in items.enumerate() {
        batches[k % nb].push(item);
    }
    batches
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Full(usize),
    Weak(usize),
}

impl<'a> Trainer<'a> {
    fn phase_rng(&self, phase: u8) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("batches.{phase}")))
    }

    fn optimizer(&self) -> SgdMomentum {
        SgdMomentum::new(self.cfg.learning_rate, self.cfg.momentum, self.cfg.clip_norm)
    }

    fn run_phase(
        &mut self,
        phase: u8,
        name: &str,
        epochs: usize,
        mut body: impl FnMut(&mut Self, usize) -> Result<EpochRecord, TrainError>,
    ) -> Result<(), TrainError> {
        let before = PartHashes::of(self.fw);
        for e in 0..epochs {
            let rec = body(self, e)?;
            log::info!(
                "phase {phase} ({name}) epoch {}/{epochs}: loss {:.6}",
                e + 1,
                rec.losses.total
            );
            self.record.epochs.push(rec);
        }
        if epochs == 0 {
            log::info!("phase {phase} ({name}) skipped");
        }
        self.record.phases.push(PhaseRecord {
            phase,
            name: name.to_string(),
            epochs,
            skipped: epochs == 0,
            before,
            after: PartHashes::of(self.fw),
        });
        if let Some(dir) = &self.opts.out_dir {
            let path = dir.join("checkpoints").join(format!("phase{phase}.ckpt"));
            save_checkpoint(&path, self.opts.header.clone(), self.fw)?;
            self.record.checkpoints.push(path);
        }
        Ok(())
    }

    fn validate_primary(&mut self) -> Result<(), TrainError> {
        if self.validation.is_empty() {
            return Ok(());
        }
        let report = evaluate(&self.fw.primary, &self.fw.store, &self.validation, self.seed)?;
        if self.best_moc.is_none_or(|b| report.moc > b) {
            self.best_moc = Some(report.moc);
            if let Some(dir) = &self.opts.out_dir {
                let path = dir.join("checkpoints").join("best.ckpt");
                save_checkpoint(&path, self.opts.header.clone(), self.fw)?;
            }
        }
        Ok(())
    }

    /// One epoch of the conditional module on `full` (ground truth, weak label as input).
    fn cond_epoch(&mut self, full: &[&WindowedSample], phase: u8, epoch: usize, opt: &mut SgdMomentum) -> Result<EpochRecord, TrainError> {
        let mut rng = self.phase_rng(phase);
        for _ in 0..epoch {
            // Advance the stream so each epoch gets its own order.
            let _ = stratified_batches(full.len(), 0, self.cfg.batch_size, &mut rng);
        }
        let batches = stratified_batches(full.len(), 0, self.cfg.batch_size, &mut rng);
        let nb = batches.len() as f64;
        let scale = SetScale {
            full: nb / full.len() as f64,
            weak: 0.0,
        };
        let mut epoch_losses = LossBreakdown::default();
        static COND: [Part; 1] = [Part::Conditional];
        let active = part_filter(&COND);
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = self.fw.store.bind(&mut tape, &active)?;
            let mut rolls = Vec::with_capacity(batch.len());
            for item in batch {
                let Item::Full(i) = *item else { unreachable!("conditional batches hold 𝓕 only") };
                let s = full[i];
                self.record.access_log.touch(&s.id, "target_segments");
                self.record.access_log.touch(&s.id, "weak_label");
                let r = self.fw.conditional.rollout(
                    &mut tape,
                    &bound,
                    &s.observed,
                    Some(s.weak_label),
                    Stop::Steps(s.target_segments.len()),
                )?;
                rolls.push((r.steps, s));
            }
            let items: Vec<FullItem<'_>> = rolls
                .iter()
                .map(|(steps, s)| FullItem {
                    primary: steps,
                    gt: &s.target_segments,
                    refined: None,
                    attn_target: None,
                })
                .collect();
            let (loss, b) = composite(&mut tape, &items, &[], scale)?;
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            step_parts(opt, &mut self.fw.store, &grads, &COND);
            epoch_losses.accumulate(&b, 1.0 / nb);
        }
        Ok(EpochRecord {
            phase,
            epoch,
            alpha: None,
            losses: epoch_losses,
        })
    }

    /// One epoch of the primary (and, in adaptive mode, the refiner).
    #[allow(clippy::too_many_arguments)]
    fn primary_epoch(
        &mut self,
        full: &[WindowedSample],
        weak: &[WeakSample],
        pseudo: &PseudoCache,
        target: &WeakTarget,
        refine_full: bool,
        phase: u8,
        epoch: usize,
        opt: &mut SgdMomentum,
    ) -> Result<EpochRecord, TrainError> {
        let mut rng = self.phase_rng(phase);
        for _ in 0..epoch {
            let _ = stratified_batches(full.len(), weak.len(), self.cfg.batch_size, &mut rng);
        }
        let batches = stratified_batches(full.len(), weak.len(), self.cfg.batch_size, &mut rng);
        let nb = batches.len() as f64;
        let inv = |n: usize| if n == 0 { 0.0 } else { nb / n as f64 };
        let scale = SetScale {
            full: inv(full.len()),
            weak: inv(weak.len()),
        };
        let attention = self.fw.config.backbone.attention;
        let adaptive = refine_full || matches!(target, WeakTarget::Adaptive);
        static PRIM: [Part; 1] = [Part::Primary];
        static PRIM_REFINE: [Part; 2] = [Part::Primary, Part::Refiner];
        let parts: &'static [Part] = if adaptive { &PRIM_REFINE } else { &PRIM };
        let active = part_filter(parts);
        let alpha = match target {
            WeakTarget::Linear(a) => Some(*a),
            _ => None,
        };
        let mut epoch_losses = LossBreakdown::default();
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = self.fw.store.bind(&mut tape, &active)?;
            let mut full_rolls: Vec<FullRoll<'_>> = Vec::new();
            let mut weak_rolls: Vec<WeakRoll<'_>> = Vec::new();
            for item in batch {
                match *item {
                    Item::Full(i) => {
                        let s = &full[i];
                        self.record.access_log.touch(&s.id, "target_segments");
                        let r = self.fw.primary.rollout(
                            &mut tape,
                            &bound,
                            &s.observed,
                            None,
                            Stop::Steps(s.target_segments.len()),
                        )?;
                        let (refined, attn) = if refine_full {
                            let q = pseudo_for(pseudo, &s.id)?.truncated(r.steps.len());
                            let refined = self.fw.refiner.refine(&mut tape, &bound, &r.steps, &q)?;
                            (Some(refined), attention.then(|| attn_rows(&q)))
                        } else {
                            (None, None)
                        };
                        full_rolls.push((r.steps, refined, attn.flatten(), s));
                    }
                    Item::Weak(j) => {
                        let s = &weak[j];
                        self.record.access_log.touch(&s.id, "weak_label");
                        let horizon = s.horizon_fraction;
                        let mut r = self.fw.primary.rollout(&mut tape, &bound, &s.observed, None, Stop::Horizon(horizon))?;
                        let (refined, attn) = match target {
                            WeakTarget::None => (None, None),
                            _ => {
                                let q_full = pseudo_for(pseudo, &s.id)?;
                                let m_c = q_full.steps_to_cover(horizon);
                                let m = r.steps.len().max(m_c);
                                self.fw.primary.extend(&mut tape, &bound, &mut r, Stop::Steps(m))?;
                                let q = q_full.truncated(r.steps.len());
                                let prim_vals = AnticipatedSequence::from_tape(&tape, &r.steps, StopReason::MaxSteps);
                                let refined = match target {
                                    WeakTarget::Linear(a) => linear_refine(&prim_vals, &q, *a)?,
                                    WeakTarget::Raw => q.clone(),
                                    WeakTarget::Adaptive => adaptive_refine(&self.fw.refiner, &self.fw.store, &prim_vals, &q)?,
                                    WeakTarget::None => unreachable!(),
                                };
                                (Some(refined), attention.then(|| attn_rows(&q)).flatten())
                            }
                        };
                        weak_rolls.push((r.steps, refined, attn, s));
                    }
                }
            }
            let full_items: Vec<FullItem<'_>> = full_rolls
                .iter()
                .map(|(steps, refined, attn, s)| FullItem {
                    primary: steps,
                    gt: &s.target_segments,
                    refined: refined.as_deref(),
                    attn_target: attn.as_deref(),
                })
                .collect();
            let weak_items: Vec<WeakItem<'_>> = weak_rolls
                .iter()
                .map(|(steps, refined, attn, s)| WeakItem {
                    primary: steps,
                    weak_label: s.weak_label,
                    refined: refined.as_ref(),
                    attn_target: attn.as_deref(),
                })
                .collect();
            let (loss, b) = composite(&mut tape, &full_items, &weak_items, scale)?;
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            step_parts(opt, &mut self.fw.store, &grads, parts);
            epoch_losses.accumulate(&b, 1.0 / nb);
        }
        self.validate_primary()?;
        Ok(EpochRecord {
            phase,
            epoch,
            alpha,
            losses: epoch_losses,
        })
    }

    /// Pseudo-labels for `ids` from the frozen conditional module.
    fn build_pseudo<'s>(
        &mut self,
        samples: impl Iterator<Item = (&'s str, &'s crate::dataset::Features, usize)>,
        audit: bool,
    ) -> Result<PseudoCache, TrainError> {
        let steps = self.fw.config.backbone.max_steps;
        let mut cache = PseudoCache::new();
        for (id, observed, weak) in samples {
            self.record.access_log.touch(id, "weak_label");
            let seq = pseudo_label(&self.fw.conditional, &self.fw.store, observed, weak, steps)?;
            if audit {
                self.record.pseudo_audit.checked += 1;
                if seq.steps.first().map(|s| s.argmax()) != Some(weak) {
                    self.record.pseudo_audit.mismatches += 1;
                }
            }
            cache.insert(id.to_string(), seq);
        }
        Ok(cache)
    }
}

fn pseudo_for<'c>(cache: &'c PseudoCache, id: &str) -> Result<&'c AnticipatedSequence, TrainError> {
    cache
        .get(id)
        .ok_or_else(|| TrainError::Config(format!("no pseudo-label for sample {id}")))
}

fn attn_rows(seq: &AnticipatedSequence) -> Option<Vec<Vec<f64>>> {
    seq.steps.iter().map(|s| s.attn_weights.clone()).collect()
}

fn check_disjoint(full: &[WindowedSample], weak: &[WeakSample]) -> Result<(), TrainError> {
    let ids: BTreeSet<&str> = full.iter().map(|s| s.id.as_str()).collect();
    if let Some(w) = weak.iter().find(|w| ids.contains(w.id.as_str())) {
        return Err(TrainError::Config(format!("sample {} is in both 𝓕 and 𝓦", w.id)));
    }
    Ok(())
}

/// Trains `fw` in `config.mode` on the fully- and weakly-labelled sets.
///
/// Baseline 1 expects every training video in `full` and an empty `weak`.
/// Baselines 1 and 2 ignore `weak`.
pub fn train(
    fw: &mut Framework,
    full: &[WindowedSample],
    weak: &[WeakSample],
    config: &TrainConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunRecord, TrainError> {
    config.validate()?;
    if full.is_empty() {
        return Err(TrainError::Config("the fully-labelled set is empty".into()));
    }
    check_disjoint(full, weak)?;
    let start = Instant::now();
    let epochs = config.epochs();
    let mode = config.mode;

    // Hold out part of 𝓕 for best-checkpoint selection.
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "validation")));
    let n_val = (config.validation_fraction * full.len() as f64).round() as usize;
    let n_val = if n_val >= full.len() { 0 } else { n_val };
    let mut val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let validation: Vec<WindowedSample> = val_idx.iter().map(|&i| full[i].clone()).collect();
    let full: Vec<WindowedSample> = train_idx.iter().map(|&i| full[i].clone()).collect();
    let weak: &[WeakSample] = match mode {
        TrainMode::Baseline1 | TrainMode::Baseline2 => &[],
        _ => weak,
    };
    if mode.uses_conditional() && weak.is_empty() && mode != TrainMode::Adaptive {
        log::warn!("{} training with an empty weak set", mode.name());
    }

    let mut t = Trainer {
        fw,
        cfg: config,
        seed,
        record: RunRecord {
            mode,
            config: config.clone(),
            seed,
            epochs: Vec::new(),
            phases: Vec::new(),
            checkpoints: Vec::new(),
            pseudo_audit: PseudoAudit::default(),
            access_log: AccessLog::default(),
            n_full: full.len(),
            n_weak: weak.len(),
            n_validation: validation.len(),
            best_validation_moc: None,
            metrics: None,
            wall_clock_secs: 0.0,
        },
        opts,
        validation,
        best_moc: None,
    };
    for s in &full {
        t.record.access_log.touch(&s.id, "observed");
    }
    for s in weak {
        t.record.access_log.touch(&s.id, "observed");
    }

    match mode {
        TrainMode::Baseline1 | TrainMode::Baseline2 | TrainMode::Baseline3 => {
            let mut opt = t.optimizer();
            t.run_phase(1, "primary", epochs.n1, |t, e| {
                t.primary_epoch(&full, weak, &PseudoCache::new(), &WeakTarget::None, false, 1, e, &mut opt)
            })?;
        }
        TrainMode::Linear | TrainMode::Pseudo => {
            let refs: Vec<&WindowedSample> = full.iter().collect();
            let mut opt = t.optimizer();
            t.run_phase(1, "conditional", epochs.n1, |t, e| t.cond_epoch(&refs, 1, e, &mut opt))?;
            let pseudo = t.build_pseudo(weak.iter().map(|w| (w.id.as_str(), &w.observed, w.weak_label)), true)?;
            let mut opt = t.optimizer();
            let schedule = config.schedule;
            t.run_phase(2, "primary", epochs.n2, |t, e| {
                let target = if mode == TrainMode::Pseudo {
                    WeakTarget::Raw
                } else {
                    WeakTarget::Linear(schedule.alpha_at(e))
                };
                t.primary_epoch(&full, weak, &pseudo, &target, false, 2, e, &mut opt)
            })?;
        }
        TrainMode::Adaptive => {
            let videos: Vec<&str> = full.iter().map(|s| video_id(&s.id)).collect::<BTreeSet<_>>().into_iter().collect();
            let n_cond = (config.cond_train_fraction * videos.len() as f64).ceil() as usize;
            if n_cond < 1 {
                return Err(TrainError::Config("cond_train_fraction selects no videos".into()));
            }
            let mut cond_order = videos.clone();
            cond_order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "cond_subset")));
            let cond_videos: BTreeSet<&str> = cond_order[..n_cond.min(videos.len())].iter().copied().collect();
            let refs: Vec<&WindowedSample> = full.iter().filter(|s| cond_videos.contains(video_id(&s.id))).collect();
            let mut opt = t.optimizer();
            t.run_phase(1, "conditional", epochs.n1, |t, e| t.cond_epoch(&refs, 1, e, &mut opt))?;
            let mut pseudo = t.build_pseudo(full.iter().map(|s| (s.id.as_str(), &s.observed, s.weak_label)), false)?;
            pseudo.extend(t.build_pseudo(weak.iter().map(|w| (w.id.as_str(), &w.observed, w.weak_label)), true)?);
            let mut opt = t.optimizer();
            t.run_phase(2, "primary+refiner", epochs.n2, |t, e| {
                t.primary_epoch(&full, &[], &pseudo, &WeakTarget::None, true, 2, e, &mut opt)
            })?;
            t.run_phase(3, "primary+refiner+weak", epochs.n3, |t, e| {
                t.primary_epoch(&full, weak, &pseudo, &WeakTarget::Adaptive, true, 3, e, &mut opt)
            })?;
        }
    }
    t.record.best_validation_moc = t.best_moc;
    t.record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(t.record)
}

/// Value-level pseudo-labels of the weak set from the trained conditional module.
pub fn pseudo_labels(fw: &Framework, weak: &[WeakSample]) -> Result<Vec<(String, AnticipatedSequence)>, TrainError> {
    weak.iter()
        .map(|w| {
            let seq = pseudo_label(&fw.conditional, &fw.store, &w.observed, w.weak_label, fw.config.backbone.max_steps)?;
            Ok((w.id.clone(), seq))
        })
        .collect()
}

/// Runs the primary backbone with gradient on `bound`; helper for external
/// gradient audits.
pub fn primary_rollout(
    fw: &Framework,
    tape: &mut Tape,
    bound: &Bound,
    sample: &WindowedSample,
) -> Result<Vec<StepOutput>, TrainError> {
    Ok(fw
        .primary
        .rollout(tape, bound, &sample.observed, None, Stop::Steps(sample.target_segments.len()))?
        .steps)
}

/// Writes the run's loss curve and record to `dir`.
pub fn write_run_files(dir: &Path, record: &RunRecord) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("losses.csv"), record.losses_csv())?;
    let log = serde_json::to_string_pretty(&record.access_log).expect("access log serialises");
    std::fs::write(dir.join("access_log.json"), log + "\n")?;
    Ok(())
}
