//! Finite-difference checks of the training objectives on a micro framework,
//! plus gradient routing between the three parts.

use densea_core::backbone::{AnticipatedSequence, BackboneConfig, DurationMode, Stop, StepOutput};
use densea_core::dataset::{ActionSegment, Features};
use densea_core::diffcore::{grad_check, Bound, DiffError, Matrix, ParamStore, SgdMomentum, Tape};
use densea_core::losses::{composite, loss_adap, loss_cond, loss_prim, FullItem, SetScale, WeakItem};
use densea_core::model::{Framework, ModelConfig, Part};
use densea_core::refinement::{pseudo_label, RefinedStep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAMES: usize = 5;
const STEPS: usize = 3;
const CLASSES: usize = 4;
const H: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-3;

fn micro(attention: bool, seed: u64) -> Framework {
    let backbone = BackboneConfig {
        feature_dim: 3,
        hidden_dim: 8,
        encoding_dim: 8,
        embed_dim: 4,
        n_classes: CLASSES,
        max_steps: STEPS,
        attention,
        duration_mode: DurationMode::Softplus,
    };
    Framework::new(ModelConfig::new(backbone), seed).unwrap()
}

fn feats(seed: u64) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Features::new(FRAMES, 3, (0..FRAMES * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn gt() -> Vec<ActionSegment> {
    [(2, 0.1), (0, 0.25), (3, 0.05)]
        .into_iter()
        .map(|(class_id, duration)| ActionSegment { class_id, duration })
        .collect()
}

fn attn_targets(seq: &AnticipatedSequence) -> Vec<Vec<f64>> {
    seq.steps.iter().map(|s| s.attn_weights.clone().unwrap()).collect()
}

struct Batch {
    full_x: Vec<Features>,
    weak_x: Features,
    weak_label: usize,
    /// Conditional outputs for the full videos and the weak one.
    pseudo_full: Vec<AnticipatedSequence>,
    pseudo_weak: AnticipatedSequence,
}

fn batch(fw: &Framework) -> Batch {
    let full_x = vec![feats(11), feats(12)];
    let weak_x = feats(13);
    let weak_label = 1;
    let pseudo_full = full_x
        .iter()
        .map(|x| pseudo_label(&fw.conditional, &fw.store, x, gt()[0].class_id, STEPS).unwrap())
        .collect();
    let pseudo_weak = pseudo_label(&fw.conditional, &fw.store, &weak_x, weak_label, STEPS).unwrap();
    Batch {
        full_x,
        weak_x,
        weak_label,
        pseudo_full,
        pseudo_weak,
    }
}

fn rollout(fw: &Framework, t: &mut Tape, bound: &Bound, x: &Features) -> Result<Vec<StepOutput>, DiffError> {
    Ok(fw.primary.rollout(t, bound, x, None, Stop::Steps(STEPS))?.steps)
}

/// `L_adap` with the attention regulariser on both sets.
fn adaptive_objective(fw: &Framework, b: &Batch, t: &mut Tape, bound: &Bound) -> Result<Matrix, DiffError> {
    let gt = gt();
    let full_steps: Vec<Vec<StepOutput>> = b.full_x.iter().map(|x| rollout(fw, t, bound, x)).collect::<Result<_, _>>()?;
    let refined: Vec<Vec<RefinedStep>> = full_steps
        .iter()
        .zip(&b.pseudo_full)
        .map(|(s, q)| fw.refiner.refine(t, bound, s, q).expect("refine"))
        .collect();
    let full_attn: Vec<Vec<Vec<f64>>> = b.pseudo_full.iter().map(attn_targets).collect();
    let weak_steps = rollout(fw, t, bound, &b.weak_x)?;
    let weak_attn = attn_targets(&b.pseudo_weak);
    let full: Vec<FullItem<'_>> = (0..full_steps.len())
        .map(|i| FullItem {
            primary: &full_steps[i],
            gt: &gt,
            refined: Some(&refined[i]),
            attn_target: Some(&full_attn[i]),
        })
        .collect();
    let weak = [WeakItem {
        primary: &weak_steps,
        weak_label: b.weak_label,
        refined: Some(&b.pseudo_weak),
        attn_target: Some(&weak_attn),
    }];
    Ok(loss_adap(t, &full, &weak).expect("loss").0)
}

#[test]
fn conditional_loss_gradient_matches_finite_differences() {
    let mut fw = micro(true, 1);
    let xs = [feats(1), feats(2)];
    let cond = fw.conditional.clone();
    let err = grad_check(&mut fw.store, H, |t, bound| {
        let gt = gt();
        let steps: Vec<Vec<StepOutput>> = xs
            .iter()
            .map(|x| Ok(cond.rollout(t, bound, x, Some(gt[0].class_id), Stop::Steps(STEPS))?.steps))
            .collect::<Result<_, DiffError>>()?;
        let items: Vec<FullItem<'_>> = steps
            .iter()
            .map(|s| FullItem {
                primary: s,
                gt: &gt,
                refined: None,
                attn_target: None,
            })
            .collect();
        Ok(loss_cond(t, &items).expect("loss").0)
    })
    .unwrap();
    assert!(err < LOSS_TOL, "relative error {err}");
}

#[test]
fn primary_loss_gradient_matches_finite_differences() {
    let mut fw = micro(true, 2);
    let b = batch(&fw);
    let snapshot = fw.clone();
    let err = grad_check(&mut fw.store, H, |t, bound| {
        let gt = gt();
        let full_steps: Vec<Vec<StepOutput>> =
            b.full_x.iter().map(|x| rollout(&snapshot, t, bound, x)).collect::<Result<_, _>>()?;
        let full_attn: Vec<Vec<Vec<f64>>> = b.pseudo_full.iter().map(attn_targets).collect();
        let weak_steps = rollout(&snapshot, t, bound, &b.weak_x)?;
        let weak_attn = attn_targets(&b.pseudo_weak);
        let full: Vec<FullItem<'_>> = (0..full_steps.len())
            .map(|i| FullItem {
                primary: &full_steps[i],
                gt: &gt,
                refined: None,
                attn_target: Some(&full_attn[i]),
            })
            .collect();
        let weak = [WeakItem {
            primary: &weak_steps,
            weak_label: b.weak_label,
            refined: Some(&b.pseudo_weak),
            attn_target: Some(&weak_attn),
        }];
        Ok(loss_prim(t, &full, &weak).expect("loss").0)
    })
    .unwrap();
    assert!(err < LOSS_TOL, "relative error {err}");
}

#[test]
fn adaptive_loss_gradient_matches_finite_differences() {
    let mut fw = micro(true, 3);
    let b = batch(&fw);
    let snapshot = fw.clone();
    let err = grad_check(&mut fw.store, H, |t, bound| adaptive_objective(&snapshot, &b, t, bound)).unwrap();
    assert!(err < LOSS_TOL, "relative error {err}");
}

#[test]
fn adaptive_loss_reaches_primary_and_refiner_only() {
    let fw = micro(true, 4);
    let b = batch(&fw);
    let mut t = Tape::new();
    let bound = fw.store.bind_all(&mut t).unwrap();
    let loss = adaptive_objective(&fw, &b, &mut t, &bound).unwrap();
    t.backward(loss).unwrap();
    let grads = bound.grads(&t);
    let touched = |part: Part| {
        fw.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(&part.prefix()))
            .any(|(id, _)| !grads.is_zero(id))
    };
    assert!(touched(Part::Primary));
    assert!(touched(Part::Refiner));
    assert!(!touched(Part::Conditional));
}

#[test]
fn attention_parameters_get_no_gradient_when_disabled() {
    let fw = micro(false, 5);
    let mut t = Tape::new();
    let bound = fw.store.bind_all(&mut t).unwrap();
    let gt = gt();
    let steps = rollout(&fw, &mut t, &bound, &feats(5)).unwrap();
    let items = [FullItem {
        primary: &steps,
        gt: &gt,
        refined: None,
        attn_target: None,
    }];
    let (loss, _) = composite(&mut t, &items, &[], SetScale::mean(1, 0)).unwrap();
    t.backward(loss).unwrap();
    let grads = bound.grads(&t);
    for id in fw.primary.attention_param_ids() {
        assert!(grads.is_zero(id), "{} has a gradient", fw.store.get(id).name);
    }
    assert!(grads.norm() > 0.0);
}

#[test]
fn attention_regulariser_descends_under_sgd() {
    let mut fw = micro(true, 6);
    let x = feats(6);
    let target: Vec<Vec<f64>> = (0..STEPS)
        .map(|m| (0..FRAMES).map(|j| if j == m { 1.0 } else { 0.0 }).collect())
        .collect();
    let only_primary = |p: &densea_core::diffcore::Parameter| p.name.starts_with("prim.");
    let mut opt = SgdMomentum::new(2.0, 0.0, None);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut t = Tape::new();
        let bound = fw.store.bind(&mut t, only_primary).unwrap();
        let steps = rollout(&fw, &mut t, &bound, &x).unwrap();
        let attn: Vec<Matrix> = steps.iter().map(|s| s.attn.unwrap()).collect();
        let loss = densea_core::losses::attn_regularizer(&mut t, &attn, &target).unwrap();
        losses.push(t.scalar_value(loss));
        t.backward(loss).unwrap();
        let grads = bound.grads(&t);
        opt.step(&mut fw.store, &grads, only_primary);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "regulariser went from {} to {}", w[0], w[1]);
    }
    assert!(losses[49] < 0.9 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn frozen_parameters_match_an_unchanged_store() {
    let fw = micro(true, 7);
    let store: ParamStore = fw.store.clone();
    let b = batch(&fw);
    let mut t = Tape::new();
    let bound = fw.store.bind(&mut t, |p| p.name.starts_with("refine.")).unwrap();
    let loss = adaptive_objective(&fw, &b, &mut t, &bound).unwrap();
    t.backward(loss).unwrap();
    let grads = bound.grads(&t);
    let mut copy = fw.store.clone();
    SgdMomentum::new(0.1, 0.9, Some(5.0)).step(&mut copy, &grads, |p| p.name.starts_with("refine."));
    assert_eq!(copy.hash("prim."), store.hash("prim."));
    assert_eq!(copy.hash("cond."), store.hash("cond."));
    assert_ne!(copy.hash("refine."), store.hash("refine."));
}
