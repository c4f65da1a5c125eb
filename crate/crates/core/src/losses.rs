//! Training objectives.
//!
//! Per sample, with `M` the number of aligned steps:
//!
//! ```text
//! supervised     Σ_m −ln ĉ_m[c_m] + (d_m − d̂_m)²
//! weak           −ln ĉ_1[c₁]
//! pseudo class   Σ_{m≥2} −Σ_k c̃′_{m,k} ln ĉ_{m,k}
//! pseudo dur.    Σ_{m≥1} (d̃′_m − d̂_m)²
//! attention      Σ_m ‖a_m − a_m^cond‖²
//! ```
//!
//! Refined pseudo-labels enter the weak-set terms as constants. Set-level
//! objectives average each term over its set (`1/|𝓕|` and `1/|𝓦|`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{AnticipatedSequence, StepOutput};
use crate::dataset::ActionSegment;
use crate::diffcore::{DiffError, Matrix, Tape};
use crate::refinement::RefinedStep;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("sample has no aligned steps ({outputs} outputs, {targets} targets)")]
    Degenerate { outputs: usize, targets: usize },
    #[error("attention regulariser: {0}")]
    Attention(String),
    #[error(transparent)]
    Numeric(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    LabelFull,
    LabelWeakC1,
    PseudoClass,
    PseudoDuration,
    RefinedSupervised,
    AttnReg,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::LabelFull,
        LossTerm::LabelWeakC1,
        LossTerm::PseudoClass,
        LossTerm::PseudoDuration,
        LossTerm::RefinedSupervised,
        LossTerm::AttnReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::LabelFull => "label_full",
            LossTerm::LabelWeakC1 => "label_weak_c1",
            LossTerm::PseudoClass => "pseudo_class",
            LossTerm::PseudoDuration => "pseudo_duration",
            LossTerm::RefinedSupervised => "refined_supervised",
            LossTerm::AttnReg => "attn_reg",
        }
    }
}

/// Scalar value of each enabled term and their sum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<LossTerm, f64>,
}

impl LossBreakdown {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.terms.get(&term).copied()
    }

    /// Adds `other` scaled by `w` term-wise.
    pub fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.total += w * other.total;
        for (t, v) in &other.terms {
            *self.terms.entry(*t).or_insert(0.0) += w * v;
        }
    }
}

/// Sum of the supervised terms over the first `min(M_out, M_gt)` steps.
pub fn supervised(tape: &mut Tape, class_dists: &[Matrix], durations: &[Matrix], gt: &[ActionSegment]) -> Result<Matrix, LossError> {
    let n = class_dists.len().min(gt.len());
    if n == 0 {
        return Err(LossError::Degenerate {
            outputs: class_dists.len(),
            targets: gt.len(),
        });
    }
    let mut terms = Vec::with_capacity(2 * n);
    for m in 0..n {
        terms.push(tape.cross_entropy(class_dists[m], gt[m].class_id)?);
        let d = tape.scalar(gt[m].duration)?;
        terms.push(tape.mse(durations[m], d)?);
    }
    Ok(tape.add_all(&terms)?)
}

fn split_steps(steps: &[StepOutput]) -> (Vec<Matrix>, Vec<Matrix>) {
    steps.iter().map(|s| (s.class_dist, s.duration)).unzip()
}

fn split_refined(steps: &[RefinedStep]) -> (Vec<Matrix>, Vec<Matrix>) {
    steps.iter().map(|s| (s.class_dist, s.duration)).unzip()
}

/// `−ln ĉ_1[c₁]`.
pub fn weak_label(tape: &mut Tape, steps: &[StepOutput], weak: usize) -> Result<Matrix, LossError> {
    let first = steps.first().ok_or(LossError::Degenerate {
        outputs: 0,
        targets: 1,
    })?;
    Ok(tape.cross_entropy(first.class_dist, weak)?)
}

/// Pseudo class term (steps `m ≥ 2`) and pseudo duration term (all steps)
/// against a constant refined sequence. The class term is `None` when fewer
/// than two steps are aligned.
pub fn pseudo_terms(
    tape: &mut Tape,
    steps: &[StepOutput],
    refined: &AnticipatedSequence,
) -> Result<(Option<Matrix>, Matrix), LossError> {
    let n = steps.len().min(refined.len());
    if n == 0 {
        return Err(LossError::Degenerate {
            outputs: steps.len(),
            targets: refined.len(),
        });
    }
    let mut class = Vec::new();
    let mut dur = Vec::with_capacity(n);
    for (m, (out, target)) in steps.iter().zip(&refined.steps).take(n).enumerate() {
        if m >= 1 {
            class.push(tape.soft_cross_entropy(out.class_dist, &target.class_dist)?);
        }
        let d = tape.scalar(target.duration)?;
        dur.push(tape.mse(out.duration, d)?);
    }
    let class = if class.is_empty() { None } else { Some(tape.add_all(&class)?) };
    Ok((class, tape.add_all(&dur)?))
}

/// `Σ_m ‖a_m − b_m‖²` with `b` held constant.
pub fn attn_regularizer(tape: &mut Tape, attn: &[Matrix], target: &[Vec<f64>]) -> Result<Matrix, LossError> {
    let n = attn.len().min(target.len());
    if n == 0 {
        return Err(LossError::Attention("no aligned steps".into()));
    }
    let mut terms = Vec::with_capacity(n);
    for m in 0..n {
        if attn[m].len() != target[m].len() {
            return Err(LossError::Attention(format!(
                "step {} has {} and {} weights",
                m + 1,
                attn[m].len(),
                target[m].len()
            )));
        }
        let t = tape.row(&target[m])?;
        terms.push(tape.squared_distance(attn[m], t)?);
    }
    Ok(tape.add_all(&terms)?)
}

/// Value-level regulariser between two lists of attention rows.
pub fn attn_regularizer_values(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::Attention(format!("{} and {} steps", a.len(), b.len())));
    }
    let mut s = 0.0;
    for (m, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(LossError::Attention(format!("step {} has {} and {} weights", m + 1, x.len(), y.len())));
        }
        s += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    }
    Ok(s)
}

/// Terms contributed by one fully-labelled sample.
pub struct FullItem<'a> {
    pub primary: &'a [StepOutput],
    pub gt: &'a [ActionSegment],
    /// Refiner output on the tape; adds the refined-supervised term.
    pub refined: Option<&'a [RefinedStep]>,
    /// Conditional attention rows; adds the attention regulariser.
    pub attn_target: Option<&'a [Vec<f64>]>,
}

/// Terms contributed by one weakly-labelled sample.
pub struct WeakItem<'a> {
    pub primary: &'a [StepOutput],
    pub weak_label: usize,
    /// Refined pseudo-label; adds the pseudo class and duration terms.
    pub refined: Option<&'a AnticipatedSequence>,
    pub attn_target: Option<&'a [Vec<f64>]>,
}

/// Per-sample weights of the two sets. `SetScale::mean` gives the
/// set-averaged objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetScale {
    pub full: f64,
    pub weak: f64,
}

impl SetScale {
    pub fn mean(n_full: usize, n_weak: usize) -> Self {
        let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self {
            full: inv(n_full),
            weak: inv(n_weak),
        }
    }
}

/// Builds the weighted sum of every enabled term on `tape`.
pub fn composite(
    tape: &mut Tape,
    full: &[FullItem<'_>],
    weak: &[WeakItem<'_>],
    scale: SetScale,
) -> Result<(Matrix, LossBreakdown), LossError> {
    let mut parts: BTreeMap<LossTerm, Vec<Matrix>> = BTreeMap::new();
    let mut push = |t: LossTerm, m: Matrix| parts.entry(t).or_default().push(m);
    for item in full {
        let (c, d) = split_steps(item.primary);
        push(LossTerm::LabelFull, supervised(tape, &c, &d, item.gt)?);
        if let Some(r) = item.refined {
            let (c, d) = split_refined(r);
            push(LossTerm::RefinedSupervised, supervised(tape, &c, &d, item.gt)?);
        }
        if let Some(t) = item.attn_target {
            let a = attention_rows(item.primary)?;
            push(LossTerm::AttnReg, attn_regularizer(tape, &a, t)?);
        }
    }
    let mut weak_parts: BTreeMap<LossTerm, Vec<Matrix>> = BTreeMap::new();
    let mut push_w = |t: LossTerm, m: Matrix| weak_parts.entry(t).or_default().push(m);
    for item in weak {
        push_w(LossTerm::LabelWeakC1, weak_label(tape, item.primary, item.weak_label)?);
        if let Some(r) = item.refined {
            let (c, d) = pseudo_terms(tape, item.primary, r)?;
            if let Some(c) = c {
                push_w(LossTerm::PseudoClass, c);
            }
            push_w(LossTerm::PseudoDuration, d);
        }
        if let Some(t) = item.attn_target {
            let a = attention_rows(item.primary)?;
            push_w(LossTerm::AttnReg, attn_regularizer(tape, &a, t)?);
        }
    }
    let mut totals = Vec::new();
    let mut breakdown = LossBreakdown::default();
    for term in LossTerm::ALL {
        let mut pieces = Vec::new();
        if let Some(v) = parts.get(&term) {
            let s = tape.add_all(v)?;
            pieces.push(scaled(tape, s, scale.full)?);
        }
        if let Some(v) = weak_parts.get(&term) {
            let s = tape.add_all(v)?;
            pieces.push(scaled(tape, s, scale.weak)?);
        }
        if pieces.is_empty() {
            continue;
        }
        let t = tape.add_all(&pieces)?;
        breakdown.terms.insert(term, tape.scalar_value(t));
        totals.push(t);
    }
    if totals.is_empty() {
        return Err(LossError::Degenerate { outputs: 0, targets: 0 });
    }
    let total = tape.add_all(&totals)?;
    breakdown.total = tape.scalar_value(total);
    Ok((total, breakdown))
}

fn scaled(tape: &mut Tape, m: Matrix, k: f64) -> Result<Matrix, DiffError> {
    if k == 1.0 {
        Ok(m)
    } else {
        tape.scale(m, k)
    }
}

fn attention_rows(steps: &[StepOutput]) -> Result<Vec<Matrix>, LossError> {
    steps
        .iter()
        .map(|s| s.attn.ok_or_else(|| LossError::Attention("primary output carries no attention".into())))
        .collect()
}

/// `(1/|𝓕|) Σ supervised`: the conditional module's objective.
pub fn loss_cond(tape: &mut Tape, full: &[FullItem<'_>]) -> Result<(Matrix, LossBreakdown), LossError> {
    composite(tape, full, &[], SetScale::mean(full.len(), 0))
}

/// Ground truth on 𝓕 plus the weak-label term on 𝓦, with no pseudo-labels.
/// Refined pseudo-labels on the weak items are ignored.
pub fn loss_label(tape: &mut Tape, full: &[FullItem<'_>], weak: &[WeakItem<'_>]) -> Result<(Matrix, LossBreakdown), LossError> {
    let stripped: Vec<WeakItem<'_>> = weak
        .iter()
        .map(|w| WeakItem {
            primary: w.primary,
            weak_label: w.weak_label,
            refined: None,
            attn_target: w.attn_target,
        })
        .collect();
    composite(tape, full, &stripped, SetScale::mean(full.len(), weak.len()))
}

/// Primary objective: every weak item must carry a refined pseudo-label.
pub fn loss_prim(tape: &mut Tape, full: &[FullItem<'_>], weak: &[WeakItem<'_>]) -> Result<(Matrix, LossBreakdown), LossError> {
    if weak.iter().any(|w| w.refined.is_none()) {
        return Err(LossError::Degenerate { outputs: 0, targets: 0 });
    }
    composite(tape, full, weak, SetScale::mean(full.len(), weak.len()))
}

/// Adaptive objective: `loss_prim` plus the supervised term on the refined 𝓕 outputs.
pub fn loss_adap(tape: &mut Tape, full: &[FullItem<'_>], weak: &[WeakItem<'_>]) -> Result<(Matrix, LossBreakdown), LossError> {
    if full.iter().any(|f| f.refined.is_none()) {
        return Err(LossError::Degenerate { outputs: 0, targets: 0 });
    }
    loss_prim(tape, full, weak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AnticipatedStep, StopReason};
    use crate::refinement::constant_steps;

    fn seg(c: usize, d: f64) -> ActionSegment {
        ActionSegment { class_id: c, duration: d }
    }

    fn seq(steps: &[(&[f64], f64)]) -> AnticipatedSequence {
        AnticipatedSequence {
            steps: steps
                .iter()
                .map(|(p, d)| AnticipatedStep {
                    class_dist: p.to_vec(),
                    duration: *d,
                    attn_weights: None,
                })
                .collect(),
            stop_reason: StopReason::MaxSteps,
        }
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let mut t = Tape::new();
        let s = constant_steps(&mut t, &seq(&[(&[0.0, 1.0], 0.2), (&[1.0, 0.0], 0.1)])).unwrap();
        let gt = [seg(1, 0.2), seg(0, 0.1)];
        let (_, b) = loss_cond(&mut t, &[FullItem { primary: &s, gt: &gt, refined: None, attn_target: None }]).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn uniform_prediction_costs_two_ln_four() {
        let mut t = Tape::new();
        let u = [0.25; 4];
        let s = constant_steps(&mut t, &seq(&[(&u, 0.2), (&u, 0.3)])).unwrap();
        let gt = [seg(1, 0.2), seg(3, 0.3)];
        let (_, b) = loss_cond(&mut t, &[FullItem { primary: &s, gt: &gt, refined: None, attn_target: None }]).unwrap();
        assert!((b.total - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_uses_shorter_sequence() {
        let mut t = Tape::new();
        let s = constant_steps(&mut t, &seq(&[(&[0.5, 0.5], 0.2)])).unwrap();
        let gt = [seg(0, 0.2), seg(1, 0.3)];
        let (_, b) = loss_cond(&mut t, &[FullItem { primary: &s, gt: &gt, refined: None, attn_target: None }]).unwrap();
        assert!((b.total - 2f64.ln()).abs() < 1e-12);
        let empty: [ActionSegment; 0] = [];
        assert!(matches!(
            loss_cond(&mut t, &[FullItem { primary: &s, gt: &empty, refined: None, attn_target: None }]),
            Err(LossError::Degenerate { .. })
        ));
    }

    #[test]
    fn empty_weak_set_reduces_to_cond() {
        let mut t = Tape::new();
        let s = constant_steps(&mut t, &seq(&[(&[0.3, 0.7], 0.25), (&[0.6, 0.4], 0.05)])).unwrap();
        let gt = [seg(1, 0.2), seg(0, 0.1)];
        let full = [FullItem { primary: &s, gt: &gt, refined: None, attn_target: None }];
        let (_, a) = loss_cond(&mut t, &full).unwrap();
        let (_, b) = loss_prim(&mut t, &full, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_distillation_fixpoint_is_entropy() {
        let mut t = Tape::new();
        let prim = seq(&[(&[0.9, 0.1], 0.2), (&[0.3, 0.7], 0.1), (&[0.5, 0.5], 0.1)]);
        let s = constant_steps(&mut t, &prim).unwrap();
        let weak = [WeakItem { primary: &s, weak_label: 0, refined: Some(&prim), attn_target: None }];
        let (_, b) = loss_prim(&mut t, &[], &weak).unwrap();
        let entropy = |p: &[f64]| -> f64 { -p.iter().map(|x| x * x.ln()).sum::<f64>() };
        let expected = entropy(&[0.3, 0.7]) + entropy(&[0.5, 0.5]);
        assert!((b.get(LossTerm::PseudoClass).unwrap() - expected).abs() < 1e-12);
        assert_eq!(b.get(LossTerm::PseudoDuration), Some(0.0));
        assert!((b.get(LossTerm::LabelWeakC1).unwrap() + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step_one_class_is_only_scored_by_the_weak_term() {
        let mut t = Tape::new();
        let prim = seq(&[(&[0.5, 0.5], 0.2)]);
        let target = seq(&[(&[0.0, 1.0], 0.2)]);
        let s = constant_steps(&mut t, &prim).unwrap();
        let weak = [WeakItem { primary: &s, weak_label: 1, refined: Some(&target), attn_target: None }];
        let (_, b) = loss_prim(&mut t, &[], &weak).unwrap();
        assert_eq!(b.get(LossTerm::PseudoClass), None);
        assert!((b.total - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_regulariser_arithmetic() {
        assert_eq!(attn_regularizer_values(&[vec![0.3, 0.7]], &[vec![0.3, 0.7]]).unwrap(), 0.0);
        assert_eq!(attn_regularizer_values(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap(), 2.0);
        assert!(attn_regularizer_values(&[vec![1.0]], &[vec![0.0, 1.0]]).is_err());
        let mut t = Tape::new();
        let a = t.row(&[1.0, 0.0]).unwrap();
        let r = attn_regularizer(&mut t, &[a], &[vec![0.0, 1.0]]).unwrap();
        assert_eq!(t.scalar_value(r), 2.0);
    }

    #[test]
    fn breakdown_total_is_sum_of_terms() {
        let mut t = Tape::new();
        let prim = seq(&[(&[0.2, 0.8], 0.3), (&[0.6, 0.4], 0.05)]);
        let tgt = seq(&[(&[0.0, 1.0], 0.2), (&[0.9, 0.1], 0.1)]);
        let s = constant_steps(&mut t, &prim).unwrap();
        let gt = [seg(1, 0.2), seg(0, 0.1)];
        let full = [FullItem { primary: &s, gt: &gt, refined: None, attn_target: None }];
        let weak = [
            WeakItem { primary: &s, weak_label: 1, refined: Some(&tgt), attn_target: None },
            WeakItem { primary: &s, weak_label: 0, refined: Some(&tgt), attn_target: None },
        ];
        let (_, b) = loss_prim(&mut t, &full, &weak).unwrap();
        let sum: f64 = b.terms.values().sum();
        assert!((b.total - sum).abs() < 1e-9);
        assert_eq!(b.terms.len(), 4);
        let (_, l) = loss_label(&mut t, &full, &weak).unwrap();
        assert_eq!(l.terms.keys().copied().collect::<Vec<_>>(), vec![LossTerm::LabelFull, LossTerm::LabelWeakC1]);
    }
}
