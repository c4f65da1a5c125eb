//! Pseudo-labels from the conditional module and their refinement.
//!
//! The linear refiner is a per-step weighted geometric mean,
//! `r ∝ p^{1/(α+1)} · q^{α/(α+1)}`, renormalised to the simplex. It is the
//! minimiser of `(1/(α+1))·KL(r‖p) + (α/(α+1))·KL(r‖q)`.
//!
//! The adaptive refiner is a learned log-linear map shared across steps:
//! `softmax([ln p, ln q]·A + a)` for classes and `exp([ln d_p, ln d_q]·g + g₀)`
//! for durations.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{AnticipatedSequence, AnticipatedStep, Backbone, StepOutput, Stop, StopReason, MIN_DURATION};
use crate::dataset::Features;
use crate::diffcore::{Bound, DiffError, Matrix, ParamId, ParamStore, Tape};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("sequences have {primary} and {pseudo} steps")]
    StepMismatch { primary: usize, pseudo: usize },
    #[error("step {step}: class distributions have {primary} and {pseudo} entries")]
    ClassMismatch { step: usize, primary: usize, pseudo: usize },
    #[error("invalid refinement setting: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `α_e = max(floor, alpha0 · decay^e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSchedule {
    pub alpha0: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for RefineSchedule {
    fn default() -> Self {
        Self {
            alpha0: 30.0,
            decay: 0.95,
            floor: 0.5,
        }
    }
}

impl RefineSchedule {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.floor > 0.0 && self.alpha0 >= self.floor) {
            return Err(RefineError::Config(format!(
                "need alpha0 >= floor > 0, got alpha0={} floor={}",
                self.alpha0, self.floor
            )));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(RefineError::Config(format!("decay must be in (0,1), got {}", self.decay)));
        }
        Ok(())
    }

    pub fn alpha_at(&self, epoch: usize) -> f64 {
        let e = i32::try_from(epoch).unwrap_or(i32::MAX);
        (self.alpha0 * self.decay.powi(e)).max(self.floor)
    }
}

/// Conditional rollout with step 1's class forced to `one_hot(weak)`, which
/// is also the decoder input for step 2.
/// Decodes exactly `steps` steps; the caller aligns against a horizon.
pub fn pseudo_label(
    cond: &Backbone,
    store: &ParamStore,
    observed: &Features,
    weak: usize,
    steps: usize,
) -> Result<AnticipatedSequence, RefineError> {
    if weak >= cond.config.n_classes {
        return Err(DiffError::Index {
            index: weak,
            len: cond.config.n_classes,
        }
        .into());
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false)?;
    let mut r = cond.rollout(&mut tape, &bound, observed, Some(weak), Stop::Steps(1))?;
    cond.feed_class(&mut tape, &bound, &mut r.state, weak)?;
    cond.extend(&mut tape, &bound, &mut r, Stop::Steps(steps))?;
    let mut seq = AnticipatedSequence::from_tape(&tape, &r.steps, StopReason::MaxSteps);
    substitute_weak(&mut seq, weak)?;
    Ok(seq)
}

/// Overwrites the first step's class distribution with `one_hot(weak)`.
pub fn substitute_weak(seq: &mut AnticipatedSequence, weak: usize) -> Result<(), RefineError> {
    if let Some(first) = seq.steps.first_mut() {
        let k = first.class_dist.len();
        if weak >= k {
            return Err(DiffError::Index { index: weak, len: k }.into());
        }
        first.class_dist.iter_mut().for_each(|p| *p = 0.0);
        first.class_dist[weak] = 1.0;
    }
    Ok(())
}

/// `(1/(α+1), α/(α+1))`, with `α = ∞` giving `(0, 1)`.
pub fn geometric_weights(alpha: f64) -> (f64, f64) {
    if alpha.is_infinite() {
        (0.0, 1.0)
    } else {
        (1.0 / (alpha + 1.0), alpha / (alpha + 1.0))
    }
}

fn weighted_log(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * x.max(f64::MIN_POSITIVE).ln()
    }
}

/// Renormalised `p^{wp} · q^{wq}`.
pub fn geometric_mix(p: &[f64], q: &[f64], wp: f64, wq: f64) -> Vec<f64> {
    let logs: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(a, b)| weighted_log(wp, *a) + weighted_log(wq, *b))
        .collect();
    let mut out = vec![0.0; logs.len()];
    crate::diffcore::softmax_into(&logs, &mut out);
    out
}

pub fn linear_refine(
    primary: &AnticipatedSequence,
    pseudo: &AnticipatedSequence,
    alpha: f64,
) -> Result<AnticipatedSequence, RefineError> {
    if !(alpha >= 0.0) {
        return Err(RefineError::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if primary.len() != pseudo.len() {
        return Err(RefineError::StepMismatch {
            primary: primary.len(),
            pseudo: pseudo.len(),
        });
    }
    let (wp, wq) = geometric_weights(alpha);
    let steps = primary
        .steps
        .iter()
        .zip(&pseudo.steps)
        .enumerate()
        .map(|(m, (p, q))| {
            if p.class_dist.len() != q.class_dist.len() {
                return Err(RefineError::ClassMismatch {
                    step: m,
                    primary: p.class_dist.len(),
                    pseudo: q.class_dist.len(),
                });
            }
            let dp = p.duration.max(MIN_DURATION);
            let dq = q.duration.max(MIN_DURATION);
            Ok(AnticipatedStep {
                class_dist: geometric_mix(&p.class_dist, &q.class_dist, wp, wq),
                duration: (weighted_log(wp, dp) + weighted_log(wq, dq)).exp(),
                attn_weights: None,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AnticipatedSequence {
        steps,
        stop_reason: primary.stop_reason,
    })
}

/// Starting point of the adaptive refiner's weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RefinerInit {
    CopyPrimary,
    CopyPseudo,
    /// Geometric mean with weight `pseudo_weight` on the pseudo-label and
    /// `1 - pseudo_weight` on the primary output.
    Geometric { pseudo_weight: f64 },
}

impl Default for RefinerInit {
    fn default() -> Self {
        RefinerInit::Geometric { pseudo_weight: 0.9 }
    }
}

impl RefinerInit {
    fn weights(self) -> (f64, f64) {
        match self {
            RefinerInit::CopyPrimary => (1.0, 0.0),
            RefinerInit::CopyPseudo => (0.0, 1.0),
            RefinerInit::Geometric { pseudo_weight } => (1.0 - pseudo_weight, pseudo_weight),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRefiner {
    pub n_classes: usize,
    /// `2K × K`: rows `0..K` read `ln p`, rows `K..2K` read `ln q`.
    pub class_w: ParamId,
    pub class_b: ParamId,
    /// `2 × 1` over `[ln d_p, ln d_q]`.
    pub dur_w: ParamId,
    pub dur_b: ParamId,
}

/// Refined step on a tape.
#[derive(Debug, Clone, Copy)]
pub struct RefinedStep {
    pub class_dist: Matrix,
    pub duration: Matrix,
}

impl AdaptiveRefiner {
    /// Registers the refiner under `prefix`. A small uniform perturbation of
    /// scale `jitter` is added on top of `init`.
    pub fn new<R: Rng>(
        n_classes: usize,
        prefix: &str,
        init: RefinerInit,
        jitter: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let k = n_classes;
        let (wp, wq) = init.weights();
        let mut noise = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if jitter > 0.0 { rng.gen_range(-jitter..jitter) } else { 0.0 })
                .collect()
        };
        let mut cw = noise(2 * k * k);
        for j in 0..k {
            cw[j * k + j] += wp;
            cw[(k + j) * k + j] += wq;
        }
        let class_w = store.add(format!("{prefix}.class_w"), 2 * k, k, cw)?;
        let class_b = store.add(format!("{prefix}.class_b"), 1, k, noise(k))?;
        let mut dw = noise(2);
        dw[0] += wp;
        dw[1] += wq;
        let dur_w = store.add(format!("{prefix}.dur_w"), 2, 1, dw)?;
        let dur_b = store.add(format!("{prefix}.dur_b"), 1, 1, noise(1))?;
        Ok(Self {
            n_classes,
            class_w,
            class_b,
            dur_w,
            dur_b,
        })
    }

    /// Refines one step: primary outputs live on the tape, the pseudo-label is a constant.
    pub fn refine_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        primary: &StepOutput,
        pseudo: &AnticipatedStep,
    ) -> Result<RefinedStep, DiffError> {
        let k = self.n_classes;
        if pseudo.class_dist.len() != k || primary.class_dist.cols() != k {
            return Err(DiffError::Shape {
                op: "adaptive_refine",
                lhs: primary.class_dist.shape(),
                rhs: (1, pseudo.class_dist.len()),
            });
        }
        let lp = tape.ln_clamped(primary.class_dist)?;
        let lq: Vec<f64> = pseudo.class_dist.iter().map(|q| q.max(f64::MIN_POSITIVE).ln().max(LOG_FLOOR)).collect();
        let lq = tape.row(&lq)?;
        let x = tape.concat_cols(&[lp, lq])?;
        let logits = crate::diffcore::linear(tape, x, bound[self.class_w], bound[self.class_b])?;
        let class_dist = tape.softmax_row(logits)?;
        let ldp = tape.ln_clamped(primary.duration)?;
        let ldq = tape.scalar(pseudo.duration.max(MIN_DURATION).ln())?;
        let xd = tape.concat_cols(&[ldp, ldq])?;
        let raw = crate::diffcore::linear(tape, xd, bound[self.dur_w], bound[self.dur_b])?;
        let duration = tape.exp(raw)?;
        Ok(RefinedStep { class_dist, duration })
    }

    pub fn refine(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        primary: &[StepOutput],
        pseudo: &AnticipatedSequence,
    ) -> Result<Vec<RefinedStep>, RefineError> {
        if primary.len() != pseudo.len() {
            return Err(RefineError::StepMismatch {
                primary: primary.len(),
                pseudo: pseudo.len(),
            });
        }
        primary
            .iter()
            .zip(&pseudo.steps)
            .map(|(p, q)| self.refine_step(tape, bound, p, q).map_err(Into::into))
            .collect()
    }
}

/// Matches the probability clamp used by `ln_clamped` on the primary half.
const LOG_FLOOR: f64 = -27.631021115928547;

/// Value-level adaptive refinement with frozen parameters.
pub fn adaptive_refine(
    refiner: &AdaptiveRefiner,
    store: &ParamStore,
    primary: &AnticipatedSequence,
    pseudo: &AnticipatedSequence,
) -> Result<AnticipatedSequence, RefineError> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false)?;
    let prim = constant_steps(&mut tape, primary)?;
    let refined = refiner.refine(&mut tape, &bound, &prim, pseudo)?;
    Ok(AnticipatedSequence {
        steps: refined
            .iter()
            .map(|r| AnticipatedStep {
                class_dist: tape.value(r.class_dist).to_vec(),
                duration: tape.scalar_value(r.duration),
                attn_weights: None,
            })
            .collect(),
        stop_reason: primary.stop_reason,
    })
}

/// Records a value sequence on `tape` as constants.
pub fn constant_steps(tape: &mut Tape, seq: &AnticipatedSequence) -> Result<Vec<StepOutput>, DiffError> {
    seq.steps
        .iter()
        .map(|s| {
            Ok(StepOutput {
                class_dist: tape.row(&s.class_dist)?,
                duration: tape.scalar(s.duration)?,
                attn: match &s.attn_weights {
                    Some(a) => Some(tape.row(a)?),
                    None => None,
                },
            })
        })
        .collect()
}

/// One audit record of a pseudo-label dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub steps: Vec<PseudoStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStep {
    pub class_dist: Vec<f64>,
    pub duration: f64,
}

impl PseudoLabelRecord {
    pub fn new(id: &str, seq: &AnticipatedSequence) -> Self {
        Self {
            id: id.to_string(),
            steps: seq
                .steps
                .iter()
                .map(|s| PseudoStep {
                    class_dist: s.class_dist.clone(),
                    duration: s.duration,
                })
                .collect(),
        }
    }

    pub fn to_sequence(&self) -> AnticipatedSequence {
        AnticipatedSequence {
            steps: self
                .steps
                .iter()
                .map(|s| AnticipatedStep {
                    class_dist: s.class_dist.clone(),
                    duration: s.duration,
                    attn_weights: None,
                })
                .collect(),
            stop_reason: StopReason::MaxSteps,
        }
    }
}

pub fn write_pseudo_labels(path: &Path, records: &[PseudoLabelRecord]) -> Result<(), RefineError> {
    let text = serde_json::to_string_pretty(records).expect("pseudo-label records serialise");
    std::fs::write(path, text + "\n").map_err(|e| RefineError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, DurationMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step(p: &[f64], d: f64) -> AnticipatedStep {
        AnticipatedStep {
            class_dist: p.to_vec(),
            duration: d,
            attn_weights: None,
        }
    }

    fn seq(steps: Vec<AnticipatedStep>) -> AnticipatedSequence {
        AnticipatedSequence {
            steps,
            stop_reason: StopReason::MaxSteps,
        }
    }

    #[test]
    fn schedule_values() {
        let s = RefineSchedule::default();
        assert_eq!(s.alpha_at(0), 30.0);
        assert!((s.alpha_at(1) - 28.5).abs() < 1e-12);
        assert_eq!(s.alpha_at(1000), 0.5);
        assert!(RefineSchedule { decay: 1.0, ..s }.validate().is_err());
        assert!(RefineSchedule { alpha0: 0.1, ..s }.validate().is_err());
    }

    #[test]
    fn two_class_geometric_mean() {
        let r = linear_refine(&seq(vec![step(&[0.8, 0.2], 0.1)]), &seq(vec![step(&[0.5, 0.5], 0.4)]), 1.0).unwrap();
        let c = &r.steps[0].class_dist;
        // sqrt(0.4) / (sqrt(0.4) + sqrt(0.1)) = 2/3
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((c[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.steps[0].duration - 0.2).abs() < 1e-12);
    }

    fn weighted_kl(r: &[f64], p: &[f64], q: &[f64], wp: f64, wq: f64) -> f64 {
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
        };
        wp * kl(r, p) + wq * kl(r, q)
    }

    #[test]
    fn two_class_mean_minimises_weighted_kl() {
        let (p, q) = ([0.8, 0.2], [0.5, 0.5]);
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..10_000 {
            let r0 = i as f64 * 1e-4;
            let f = weighted_kl(&[r0, 1.0 - r0], &p, &q, 0.5, 0.5);
            if f < best.0 {
                best = (f, r0);
            }
        }
        let g = geometric_mix(&p, &q, 0.5, 0.5);
        assert!((best.1 - g[0]).abs() < 1e-4);
        assert!(weighted_kl(&g, &p, &q, 0.5, 0.5) <= best.0 + 1e-12);
    }

    #[test]
    fn limit_cases() {
        let p = seq(vec![step(&[0.7, 0.2, 0.1], 0.3), step(&[0.1, 0.1, 0.8], 0.05)]);
        let q = seq(vec![step(&[0.0, 1.0, 0.0], 0.2), step(&[0.3, 0.3, 0.4], 0.1)]);
        let r0 = linear_refine(&p, &q, 0.0).unwrap();
        let rinf = linear_refine(&p, &q, 1e9).unwrap();
        for m in 0..2 {
            for k in 0..3 {
                assert!((r0.steps[m].class_dist[k] - p.steps[m].class_dist[k]).abs() < 1e-9);
                assert!((rinf.steps[m].class_dist[k] - q.steps[m].class_dist[k]).abs() < 1e-6);
            }
            assert!((r0.steps[m].duration - p.steps[m].duration).abs() < 1e-9);
            assert!((rinf.steps[m].duration - q.steps[m].duration).abs() < 1e-6);
        }
        assert!(matches!(
            linear_refine(&p, &q.truncated(1), 1.0),
            Err(RefineError::StepMismatch { .. })
        ));
    }

    #[test]
    fn weak_label_substitution() {
        let cfg = BackboneConfig {
            feature_dim: 3,
            hidden_dim: 6,
            encoding_dim: 4,
            embed_dim: 3,
            n_classes: 5,
            max_steps: 4,
            attention: true,
            duration_mode: DurationMode::Softplus,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cond = Backbone::new(cfg, "cond", true, &mut store, &mut rng).unwrap();
        let x = Features::new(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let raw = crate::backbone::rollout_values(&cond, &store, &x, Some(3), 3).unwrap();
        let pl = pseudo_label(&cond, &store, &x, 3, 3).unwrap();
        assert_eq!(pl.steps[0].class_dist, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(pl.steps[0].duration, raw.steps[0].duration);
        // Step 2 reads the embedding of the weak class, not the model's own step-1 output.
        let mut t = Tape::new();
        let bound = store.bind(&mut t, |_| false).unwrap();
        let enc = cond.encode(&mut t, &bound, &x).unwrap();
        let mut state = cond.start(&mut t, &bound, &enc, Some(3)).unwrap();
        cond.decode_step(&mut t, &bound, &mut state, &enc).unwrap();
        let emb = store.get(cond.params.class_emb).values[3 * 3..4 * 3].to_vec();
        let input = t.row(&[emb, vec![0.0; 3]].concat()).unwrap();
        state.input = input;
        let second = cond.decode_step(&mut t, &bound, &mut state, &enc).unwrap();
        assert_eq!(pl.steps[1].class_dist, t.value(second.class_dist));
        assert_eq!(pl.steps[1].duration, t.scalar_value(second.duration));
        assert!(pseudo_label(&cond, &store, &x, 5, 3).is_err());
    }

    fn refiner(init: RefinerInit, jitter: f64, seed: u64) -> (AdaptiveRefiner, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = AdaptiveRefiner::new(3, "refine", init, jitter, &mut store, &mut rng).unwrap();
        (r, store)
    }

    #[test]
    fn copy_inits_reproduce_their_source() {
        let p = seq(vec![step(&[0.6, 0.3, 0.1], 0.25), step(&[0.2, 0.5, 0.3], 0.1)]);
        let q = seq(vec![step(&[0.1, 0.1, 0.8], 0.05), step(&[0.3, 0.3, 0.4], 0.4)]);
        let (r, s) = refiner(RefinerInit::CopyPrimary, 0.0, 0);
        let out = adaptive_refine(&r, &s, &p, &q).unwrap();
        for (a, b) in out.steps.iter().zip(&p.steps) {
            for (x, y) in a.class_dist.iter().zip(&b.class_dist) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((a.duration - b.duration).abs() < 1e-9);
        }
        let (r, s) = refiner(RefinerInit::CopyPseudo, 0.0, 0);
        let out = adaptive_refine(&r, &s, &p, &q).unwrap();
        assert!((out.steps[1].duration - 0.4).abs() < 1e-9);
        assert!((out.steps[0].class_dist[2] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn geometric_init_matches_linear_refinement() {
        let p = seq(vec![step(&[0.6, 0.3, 0.1], 0.25)]);
        let q = seq(vec![step(&[0.1, 0.1, 0.8], 0.05)]);
        let (r, s) = refiner(RefinerInit::Geometric { pseudo_weight: 0.75 }, 0.0, 0);
        let a = adaptive_refine(&r, &s, &p, &q).unwrap();
        let l = linear_refine(&p, &q, 3.0).unwrap();
        for (x, y) in a.steps[0].class_dist.iter().zip(&l.steps[0].class_dist) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.steps[0].duration - l.steps[0].duration).abs() < 1e-12);
    }

    #[test]
    fn random_refiners_stay_on_the_simplex() {
        let p = seq(vec![step(&[0.6, 0.3, 0.1], 0.25), step(&[1e-30, 0.5, 0.5], 1e-4)]);
        let q = seq(vec![step(&[0.0, 0.0, 1.0], 0.05), step(&[0.3, 0.3, 0.4], 0.4)]);
        for seed in 0..20 {
            let (r, s) = refiner(RefinerInit::default(), 1.0, seed);
            let out = adaptive_refine(&r, &s, &p, &q).unwrap();
            for st in &out.steps {
                assert!((st.class_dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(st.duration > 0.0);
            }
        }
    }

    #[test]
    fn pseudo_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pseudo.json");
        let s = seq(vec![step(&[0.25, 0.75], 0.125)]);
        write_pseudo_labels(&path, &[PseudoLabelRecord::new("vid_0001", &s)]).unwrap();
        let back: Vec<PseudoLabelRecord> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back[0].id, "vid_0001");
        assert_eq!(back[0].to_sequence(), s);
    }
}
