//! Recursive LSTM encoder–decoder anticipator with duration attention.
//!
//! The encoder runs over the observed frames and its hidden states, projected
//! to `encoding_dim`, form the video encoding `I`. The decoder starts from the
//! encoder's final state and emits one `(class distribution, duration)` pair
//! per step. Its next input is the predicted distribution times a learned
//! class-embedding matrix.
//!
//! Duration with attention at step `m`:
//!
//! ```text
//! H'_m  = W·H_m + b
//! a_m   = softmax(H'_m Iᵀ / sqrt(d_I))
//! d_m   = softplus([a_m I, H_{m-1}]·β + ε)
//! ```
//!
//! `H_m` is the decoder state after step `m` and `H_{m-1}` the state before it.
//! Without attention the duration is `softplus(H_m·β_h + ε)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Features;
use crate::diffcore::{linear, lstm_step, Bound, DiffError, LstmParams, Matrix, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationMode {
    /// Softplus-rectified head; durations are always positive.
    Softplus,
    /// The raw linear head. Durations may be non-positive.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub encoding_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub max_steps: usize,
    pub attention: bool,
    pub duration_mode: DurationMode,
}

impl BackboneConfig {
    /// Paper-scale defaults: 512 hidden units, at most 12 decoding steps.
    pub fn new(feature_dim: usize, n_classes: usize) -> Self {
        Self {
            feature_dim,
            hidden_dim: 512,
            encoding_dim: 512,
            embed_dim: 32,
            n_classes,
            max_steps: 12,
            attention: true,
            duration_mode: DurationMode::Softplus,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoding_dim", self.encoding_dim),
            ("embed_dim", self.embed_dim),
            ("max_steps", self.max_steps),
        ] {
            if v == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if self.n_classes < 2 {
            return Err(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        Ok(())
    }
}

/// Parameter handles of one backbone instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub enc_proj_w: ParamId,
    pub enc_proj_b: ParamId,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
    pub class_emb: ParamId,
    pub start: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    /// `W` of the attention projection, stored as `d_h × d_I` for row vectors.
    pub attn_w: ParamId,
    pub attn_b: ParamId,
    pub beta_ctx: ParamId,
    pub beta_hidden: ParamId,
    pub eps: ParamId,
    /// Weak-label embedding; present on the conditional module only.
    pub weak_emb: Option<ParamId>,
}

/// Encoder output: `I` (`T × d_I`) and the final LSTM state.
#[derive(Debug, Clone, Copy)]
pub struct VideoEncoding {
    pub states: Matrix,
    pub final_h: Matrix,
    pub final_c: Matrix,
}

impl VideoEncoding {
    pub fn frames(&self) -> usize {
        self.states.rows()
    }
}

/// Tape values of one decoding step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub class_dist: Matrix,
    pub duration: Matrix,
    pub attn: Option<Matrix>,
}

/// Recurrent state carried between decoding steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Matrix,
    pub c: Matrix,
    pub input: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    HorizonCovered,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticipatedStep {
    pub class_dist: Vec<f64>,
    pub duration: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attn_weights: Option<Vec<f64>>,
}

impl AnticipatedStep {
    pub fn argmax(&self) -> usize {
        argmax(&self.class_dist)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `ŷ = {(ĉ_m, d̂_m)}` as plain values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticipatedSequence {
    pub steps: Vec<AnticipatedStep>,
    pub stop_reason: StopReason,
}

impl AnticipatedSequence {
    pub fn from_tape(tape: &Tape, steps: &[StepOutput], stop_reason: StopReason) -> Self {
        Self {
            steps: steps
                .iter()
                .map(|s| AnticipatedStep {
                    class_dist: tape.value(s.class_dist).to_vec(),
                    duration: tape.scalar_value(s.duration),
                    attn_weights: s.attn.map(|a| tape.value(a).to_vec()),
                })
                .collect(),
            stop_reason,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.steps.iter().map(|s| s.duration).sum()
    }

    /// Number of leading steps whose cumulative duration first reaches
    /// `horizon`, or the full length if it never does.
    pub fn steps_to_cover(&self, horizon: f64) -> usize {
        steps_to_cover(self.steps.iter().map(|s| s.duration), horizon).unwrap_or(self.steps.len())
    }

    /// Keeps the first `n` steps.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            steps: self.steps[..n.min(self.steps.len())].to_vec(),
            stop_reason: self.stop_reason,
        }
    }

    /// Cuts the sequence at `horizon` and stretches or trims the last
    /// duration so the total equals `horizon` exactly.
    pub fn fit_to_horizon(&self, horizon: f64) -> Self {
        let (n, reason) = match steps_to_cover(self.steps.iter().map(|s| s.duration), horizon) {
            Some(n) => (n, StopReason::HorizonCovered),
            None => (self.steps.len(), StopReason::MaxSteps),
        };
        let mut steps = self.steps[..n].to_vec();
        let before: f64 = steps[..n.saturating_sub(1)].iter().map(|s| s.duration.max(MIN_DURATION)).sum();
        for s in steps.iter_mut() {
            s.duration = s.duration.max(MIN_DURATION);
        }
        if let Some(last) = steps.last_mut() {
            last.duration = (horizon - before).max(0.0);
        }
        Self {
            steps,
            stop_reason: reason,
        }
    }
}

/// Floor applied to non-positive durations from the raw linear head.
pub const MIN_DURATION: f64 = 1e-6;

fn steps_to_cover(durations: impl Iterator<Item = f64>, horizon: f64) -> Option<usize> {
    let mut acc = 0.0;
    for (i, d) in durations.enumerate() {
        acc += d.max(MIN_DURATION);
        if acc >= horizon {
            return Some(i + 1);
        }
    }
    None
}

/// One encoder–decoder anticipator whose parameters live in a shared store
/// under `prefix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub prefix: String,
    pub params: BackboneParams,
}

impl Backbone {
    /// Registers parameters in `store`. A conditional backbone also gets a
    /// weak-label embedding concatenated to its decoder input.
    pub fn new<R: Rng>(
        config: BackboneConfig,
        prefix: &str,
        conditional: bool,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let c = &config;
        let (dx, dh, di, de, k) = (c.feature_dim, c.hidden_dim, c.encoding_dim, c.embed_dim, c.n_classes);
        let din = if conditional { 2 * de } else { de };
        let name = |s: &str| format!("{prefix}.{s}");
        let enc_w = store.add_uniform(name("enc.w"), dx + dh, 4 * dh, dx + dh, rng)?;
        let enc_b = store.add_uniform(name("enc.b"), 1, 4 * dh, dh, rng)?;
        let enc_proj_w = store.add_uniform(name("enc_proj.w"), dh, di, dh, rng)?;
        let enc_proj_b = store.add_uniform(name("enc_proj.b"), 1, di, dh, rng)?;
        let dec_w = store.add_uniform(name("dec.w"), din + dh, 4 * dh, din + dh, rng)?;
        let dec_b = store.add_uniform(name("dec.b"), 1, 4 * dh, dh, rng)?;
        let class_emb = store.add_uniform(name("class_emb"), k, de, k, rng)?;
        let start = store.add_uniform(name("start"), 1, de, de, rng)?;
        let cls_w = store.add_uniform(name("cls.w"), dh, k, dh, rng)?;
        let cls_b = store.add_uniform(name("cls.b"), 1, k, dh, rng)?;
        let attn_w = store.add_uniform(name("attn.w"), dh, di, dh, rng)?;
        let attn_b = store.add_uniform(name("attn.b"), 1, di, dh, rng)?;
        let beta_ctx = store.add_uniform(name("dur.beta_ctx"), di, 1, di + dh, rng)?;
        let beta_hidden = store.add_uniform(name("dur.beta_hidden"), dh, 1, di + dh, rng)?;
        let eps = store.add_uniform(name("dur.eps"), 1, 1, 1, rng)?;
        let weak_emb = if conditional {
            Some(store.add_uniform(name("weak_emb"), k, de, k, rng)?)
        } else {
            None
        };
        if !config.attention {
            for id in [attn_w, attn_b, beta_ctx] {
                store.set_trainable(id, false);
            }
        }
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            params: BackboneParams {
                enc_w,
                enc_b,
                enc_proj_w,
                enc_proj_b,
                dec_w,
                dec_b,
                class_emb,
                start,
                cls_w,
                cls_b,
                attn_w,
                attn_b,
                beta_ctx,
                beta_hidden,
                eps,
                weak_emb,
            },
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.params.weak_emb.is_some()
    }

    /// Parameter names of the attention head (projection and context weights).
    pub fn attention_param_ids(&self) -> [ParamId; 3] {
        [self.params.attn_w, self.params.attn_b, self.params.beta_ctx]
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, observed: &Features) -> Result<VideoEncoding, DiffError> {
        if observed.frames == 0 {
            return Err(DiffError::Empty { op: "encode" });
        }
        if observed.dim != self.config.feature_dim {
            return Err(DiffError::Shape {
                op: "encode",
                lhs: (observed.frames, observed.dim),
                rhs: (observed.frames, self.config.feature_dim),
            });
        }
        let p = &self.params;
        let cell = LstmParams {
            weight: bound[p.enc_w],
            bias: bound[p.enc_b],
        };
        let dh = self.config.hidden_dim;
        let mut h = tape.constant(1, dh, vec![0.0; dh])?;
        let mut c = h;
        let mut hs = Vec::with_capacity(observed.frames);
        for t in 0..observed.frames {
            let x = tape.row(observed.row(t))?;
            (h, c) = lstm_step(tape, x, h, c, &cell)?;
            hs.push(h);
        }
        let stacked = tape.concat_rows(&hs)?;
        let states = linear(tape, stacked, bound[p.enc_proj_w], bound[p.enc_proj_b])?;
        Ok(VideoEncoding {
            states,
            final_h: h,
            final_c: c,
        })
    }

    /// Attention of a decoder state over the encoding: `(weights, context)`.
    pub fn attention_score(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hidden: Matrix,
        enc: &VideoEncoding,
    ) -> Result<(Matrix, Matrix), DiffError> {
        attention_score(tape, hidden, enc.states, bound[self.params.attn_w], bound[self.params.attn_b])
    }

    /// Initial decoder state; `weak` must be given exactly for a conditional backbone.
    pub fn start(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: &VideoEncoding,
        weak: Option<usize>,
    ) -> Result<DecoderState, DiffError> {
        let start = bound[self.params.start];
        let input = match (self.params.weak_emb, weak) {
            (Some(emb), Some(c)) => {
                let k = self.config.n_classes;
                if c >= k {
                    return Err(DiffError::Index { index: c, len: k });
                }
                let mut onehot = vec![0.0; k];
                onehot[c] = 1.0;
                let oh = tape.row(&onehot)?;
                let w = tape.matmul(oh, bound[emb])?;
                tape.concat_cols(&[start, w])?
            }
            (None, None) => start,
            (Some(_), None) => return Err(DiffError::Empty { op: "conditional start without weak label" }),
            (None, Some(_)) => {
                return Err(DiffError::Shape {
                    op: "weak label given to an unconditional decoder",
                    lhs: (1, 1),
                    rhs: (0, 0),
                })
            }
        };
        Ok(DecoderState {
            h: enc.final_h,
            c: enc.final_c,
            input,
        })
    }

    /// Advances the decoder one step and returns this step's outputs.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        state: &mut DecoderState,
        enc: &VideoEncoding,
    ) -> Result<StepOutput, DiffError> {
        let p = &self.params;
        let cell = LstmParams {
            weight: bound[p.dec_w],
            bias: bound[p.dec_b],
        };
        let h_prev = state.h;
        let (h, c) = lstm_step(tape, state.input, state.h, state.c, &cell)?;
        let logits = linear(tape, h, bound[p.cls_w], bound[p.cls_b])?;
        let class_dist = tape.softmax_row(logits)?;
        let (raw, attn) = if self.config.attention {
            let (weights, ctx) = self.attention_score(tape, bound, h, enc)?;
            let a = tape.matmul(ctx, bound[p.beta_ctx])?;
            let b = tape.matmul(h_prev, bound[p.beta_hidden])?;
            let s = tape.add(a, b)?;
            (tape.add(s, bound[p.eps])?, Some(weights))
        } else {
            let b = tape.matmul(h, bound[p.beta_hidden])?;
            (tape.add(b, bound[p.eps])?, None)
        };
        let duration = match self.config.duration_mode {
            DurationMode::Softplus => tape.softplus(raw)?,
            DurationMode::Linear => raw,
        };
        let emb = tape.matmul(class_dist, bound[p.class_emb])?;
        let input = if self.is_conditional() {
            let de = self.config.embed_dim;
            let pad = tape.constant(1, de, vec![0.0; de])?;
            tape.concat_cols(&[emb, pad])?
        } else {
            emb
        };
        *state = DecoderState { h, c, input };
        Ok(StepOutput {
            class_dist,
            duration,
            attn,
        })
    }

    /// Replaces the next decoder input with the embedding of `class`.
    pub fn feed_class(&self, tape: &mut Tape, bound: &Bound, state: &mut DecoderState, class: usize) -> Result<(), DiffError> {
        let k = self.config.n_classes;
        if class >= k {
            return Err(DiffError::Index { index: class, len: k });
        }
        let de = self.config.embed_dim;
        let hot = tape_one_hot(tape, k, class)?;
        let emb = tape.matmul(hot, bound[self.params.class_emb])?;
        state.input = if self.is_conditional() {
            let pad = tape.constant(1, de, vec![0.0; de])?;
            tape.concat_cols(&[emb, pad])?
        } else {
            emb
        };
        Ok(())
    }

    /// Decodes until `stop` says so or `max_steps` is reached.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        observed: &Features,
        weak: Option<usize>,
        stop: Stop,
    ) -> Result<Rollout, DiffError> {
        let enc = self.encode(tape, bound, observed)?;
        let state = self.start(tape, bound, &enc, weak)?;
        let mut r = Rollout {
            enc,
            state,
            steps: Vec::new(),
            covered: 0.0,
        };
        self.extend(tape, bound, &mut r, stop)?;
        Ok(r)
    }

    /// Continues a rollout under a new stopping rule.
    pub fn extend(&self, tape: &mut Tape, bound: &Bound, r: &mut Rollout, stop: Stop) -> Result<(), DiffError> {
        let cap = self.config.max_steps;
        loop {
            let n = r.steps.len();
            let done = match stop {
                Stop::Steps(m) => n >= m.min(cap),
                Stop::Horizon(hz) => n >= cap || (n > 0 && r.covered >= hz),
            };
            if done {
                return Ok(());
            }
            let out = self.decode_step(tape, bound, &mut r.state, &r.enc)?;
            r.covered += tape.scalar_value(out.duration).max(MIN_DURATION);
            r.steps.push(out);
        }
    }
}

fn tape_one_hot(tape: &mut Tape, k: usize, class: usize) -> Result<Matrix, DiffError> {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    tape.constant(1, k, v)
}

/// When a rollout stops decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    /// Exactly this many steps (capped at `max_steps`).
    Steps(usize),
    /// Until cumulative duration reaches the horizon (capped at `max_steps`).
    Horizon(f64),
}

/// An in-progress decode on a tape.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub enc: VideoEncoding,
    pub state: DecoderState,
    pub steps: Vec<StepOutput>,
    covered: f64,
}

impl Rollout {
    pub fn covered(&self) -> f64 {
        self.covered
    }
}

/// `softmax((h·W + b)·Iᵀ / sqrt(d_I))` and the weighted sum of the rows of `I`.
pub fn attention_score(
    tape: &mut Tape,
    hidden: Matrix,
    states: Matrix,
    w: Matrix,
    b: Matrix,
) -> Result<(Matrix, Matrix), DiffError> {
    let di = states.cols();
    let q = linear(tape, hidden, w, b)?;
    let scores = tape.matmul_nt(q, states)?;
    let scores = tape.scale(scores, 1.0 / (di as f64).sqrt())?;
    let weights = tape.softmax_row(scores)?;
    let ctx = tape.matmul(weights, states)?;
    Ok((weights, ctx))
}

/// Horizon-stopped anticipation on a frozen parameter snapshot.
pub fn anticipate(
    model: &Backbone,
    store: &ParamStore,
    observed: &Features,
    weak: Option<usize>,
    horizon: f64,
) -> Result<AnticipatedSequence, AnticipateError> {
    if !(horizon > 0.0) {
        return Err(AnticipateError::Horizon(horizon));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false)?;
    let r = model.rollout(&mut tape, &bound, observed, weak, Stop::Horizon(horizon))?;
    let seq = AnticipatedSequence::from_tape(&tape, &r.steps, StopReason::MaxSteps);
    Ok(seq.fit_to_horizon(horizon))
}

/// Fixed-length rollout on a frozen snapshot, without horizon truncation.
pub fn rollout_values(
    model: &Backbone,
    store: &ParamStore,
    observed: &Features,
    weak: Option<usize>,
    steps: usize,
) -> Result<AnticipatedSequence, DiffError> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false)?;
    let r = model.rollout(&mut tape, &bound, observed, weak, Stop::Steps(steps))?;
    Ok(AnticipatedSequence::from_tape(&tape, &r.steps, StopReason::MaxSteps))
}

#[derive(Debug, thiserror::Error)]
pub enum AnticipateError {
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
    #[error(transparent)]
    Numeric(#[from] DiffError),
}

/// Trainable scalars under `prefix`.
pub fn count_parameters(store: &ParamStore, prefix: &str) -> usize {
    store.count_trainable(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro(attention: bool, seed: u64) -> (Backbone, ParamStore) {
        let cfg = BackboneConfig {
            feature_dim: 3,
            hidden_dim: 8,
            encoding_dim: 6,
            embed_dim: 4,
            n_classes: 4,
            max_steps: 3,
            attention,
            duration_mode: DurationMode::Softplus,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Backbone::new(cfg, "prim", false, &mut store, &mut rng).unwrap();
        (b, store)
    }

    fn feats(frames: usize, dim: usize, seed: u64) -> Features {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Features::new(frames, dim, (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_frame_encoding_has_one_row() {
        let (b, s) = micro(true, 1);
        let mut t = Tape::new();
        let bound = s.bind_all(&mut t).unwrap();
        let enc = b.encode(&mut t, &bound, &feats(1, 3, 0)).unwrap();
        assert_eq!(enc.states.shape(), (1, 6));
        let empty = Features::new(0, 3, vec![]);
        assert!(b.encode(&mut t, &bound, &empty).is_err());
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let (b, mut s) = micro(true, 2);
        let ids: Vec<_> = s.iter().map(|(id, _)| id).collect();
        for id in ids {
            s.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let bound = s.bind_all(&mut t).unwrap();
        let enc = b.encode(&mut t, &bound, &feats(5, 3, 1)).unwrap();
        assert!(t.value(enc.states).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_frame_attention_is_trivial() {
        let (b, s) = micro(true, 3);
        let mut t = Tape::new();
        let bound = s.bind_all(&mut t).unwrap();
        let enc = b.encode(&mut t, &bound, &feats(1, 3, 2)).unwrap();
        let h = t.row(&[0.3; 8]).unwrap();
        let (w, ctx) = b.attention_score(&mut t, &bound, h, &enc).unwrap();
        assert_eq!(t.value(w), &[1.0]);
        let i0 = t.value(enc.states).to_vec();
        for (a, e) in t.value(ctx).iter().zip(&i0) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_rows_give_that_row_as_context() {
        let mut t = Tape::new();
        let states = t.constant(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let w = t.constant(4, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let b = t.row(&[0.2, 0.1]).unwrap();
        for hv in [[1.0, 0.0, -1.0, 0.5], [3.0, 2.0, 1.0, 0.0]] {
            let h = t.row(&hv).unwrap();
            let (_, ctx) = attention_score(&mut t, h, states, w, b).unwrap();
            assert!((t.value(ctx)[0] - 0.5).abs() < 1e-12);
            assert!((t.value(ctx)[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_shift_invariant() {
        // Every row of I has 1.0 in column 1, so moving the bias along that
        // column adds the same offset to every score.
        let mut t = Tape::new();
        let w = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b0 = t.row(&[0.0, 0.0]).unwrap();
        let b1 = t.row(&[0.0, 5.0]).unwrap();
        let states = t.constant(3, 2, vec![0.1, 1.0, -0.4, 1.0, 0.9, 1.0]).unwrap();
        let h = t.row(&[0.7, -0.2]).unwrap();
        let (w0, _) = attention_score(&mut t, h, states, w, b0).unwrap();
        let (w1, _) = attention_score(&mut t, h, states, w, b1).unwrap();
        for (x, y) in t.value(w0).iter().zip(t.value(w1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_permutation_symmetry() {
        let (b, mut s) = micro(true, 4);
        let x = feats(5, 3, 5);
        let perm = [2usize, 0, 1];
        let mut t = Tape::new();
        let bound = s.bind_all(&mut t).unwrap();
        let base = b.encode(&mut t, &bound, &x).unwrap();
        let base = t.value(base.states).to_vec();
        let px = Features::new(
            5,
            3,
            (0..5).flat_map(|r| perm.iter().map(move |&j| (r, j))).map(|(r, j)| x.row(r)[j]).collect(),
        );
        let w = s.get(b.params.enc_w).clone();
        let cols = w.cols;
        let mut nw = w.values.clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            nw[new_row * cols..(new_row + 1) * cols].copy_from_slice(&w.values[old_row * cols..(old_row + 1) * cols]);
        }
        s.get_mut(b.params.enc_w).values = nw;
        let mut t = Tape::new();
        let bound = s.bind_all(&mut t).unwrap();
        let permuted = b.encode(&mut t, &bound, &px).unwrap();
        for (a, e) in t.value(permuted.states).iter().zip(&base) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn durations_positive_and_distributions_normalised() {
        for seed in 0..5 {
            let (b, mut s) = micro(true, seed);
            let eps = b.params.eps;
            s.get_mut(eps).values[0] = -40.0;
            let mut t = Tape::new();
            let bound = s.bind_all(&mut t).unwrap();
            let r = b.rollout(&mut t, &bound, &feats(4, 3, seed), None, Stop::Steps(3)).unwrap();
            for st in &r.steps {
                assert!(t.scalar_value(st.duration) > 0.0);
                let sum: f64 = t.value(st.class_dist).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                let asum: f64 = t.value(st.attn.unwrap()).iter().sum();
                assert!((asum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn no_attention_duration_reads_current_state_only() {
        let (b, s) = micro(false, 5);
        let mut t = Tape::new();
        let bound = s.bind_all(&mut t).unwrap();
        let enc = b.encode(&mut t, &bound, &feats(4, 3, 1)).unwrap();
        let mut st = b.start(&mut t, &bound, &enc, None).unwrap();
        let out = b.decode_step(&mut t, &bound, &mut st, &enc).unwrap();
        assert!(out.attn.is_none());
        let h = t.value(st.h).to_vec();
        let beta = &s.get(b.params.beta_hidden).values;
        let eps = s.get(b.params.eps).values[0];
        let raw: f64 = h.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + eps;
        assert!((t.scalar_value(out.duration) - crate::diffcore::softplus(raw)).abs() < 1e-12);
    }

    #[test]
    fn truncation_fills_the_horizon() {
        let step = |d: f64| AnticipatedStep {
            class_dist: vec![1.0, 0.0],
            duration: d,
            attn_weights: None,
        };
        let seq = AnticipatedSequence {
            steps: vec![step(0.3), step(0.3)],
            stop_reason: StopReason::MaxSteps,
        };
        let fit = seq.fit_to_horizon(0.5);
        assert_eq!(fit.stop_reason, StopReason::HorizonCovered);
        assert!((fit.steps[1].duration - 0.2).abs() < 1e-12);
        let short = AnticipatedSequence {
            steps: vec![step(0.1)],
            stop_reason: StopReason::MaxSteps,
        }
        .fit_to_horizon(0.5);
        assert_eq!(short.stop_reason, StopReason::MaxSteps);
        assert!((short.total_duration() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_step_cap() {
        let (mut b, s) = micro(true, 6);
        b.config.max_steps = 1;
        let seq = anticipate(&b, &s, &feats(4, 3, 2), None, 0.5).unwrap();
        assert_eq!(seq.len(), 1);
        assert!((seq.total_duration() - 0.5).abs() < 1e-12);
        assert!(matches!(
            anticipate(&b, &s, &feats(4, 3, 2), None, 0.0),
            Err(AnticipateError::Horizon(_))
        ));
    }

    #[test]
    fn untrained_models_are_near_uniform() {
        for seed in 0..20 {
            let cfg = BackboneConfig {
                hidden_dim: 32,
                encoding_dim: 32,
                embed_dim: 8,
                ..BackboneConfig::new(16, 10)
            };
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Backbone::new(cfg, "prim", false, &mut store, &mut rng).unwrap();
            let seq = rollout_values(&b, &store, &feats(20, 16, seed), None, 4).unwrap();
            for st in &seq.steps {
                let max = st.class_dist.iter().cloned().fold(f64::MIN, f64::max);
                let min = st.class_dist.iter().cloned().fold(f64::MAX, f64::min);
                assert!(max - min < 0.2, "seed {seed}: {max} - {min}");
            }
        }
    }

    #[test]
    fn parameter_counts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.add_uniform("cell.w", 64 + 512, 4 * 512, 576, &mut rng).unwrap();
        store.add_uniform("cell.b", 1, 4 * 512, 512, &mut rng).unwrap();
        assert_eq!(count_parameters(&store, "cell."), 1_181_696);
        let (b, s) = micro(false, 0);
        let with_attn = micro(true, 0).1;
        let attn: usize = b.attention_param_ids().iter().map(|id| s.get(*id).len()).sum();
        assert_eq!(count_parameters(&with_attn, "prim.") - count_parameters(&s, "prim."), attn);
    }

    #[test]
    fn conditional_needs_weak_label_in_range() {
        let cfg = micro(true, 0).0.config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Backbone::new(cfg, "cond", true, &mut store, &mut rng).unwrap();
        let x = feats(3, 3, 0);
        assert!(rollout_values(&c, &store, &x, Some(2), 2).is_ok());
        assert!(matches!(
            rollout_values(&c, &store, &x, Some(4), 2),
            Err(DiffError::Index { .. })
        ));
        assert!(rollout_values(&c, &store, &x, None, 2).is_err());
    }

    #[test]
    fn attention_head_gradient_check() {
        let (b, mut s) = micro(true, 7);
        let x = feats(5, 3, 8);
        let err = grad_check(&mut s, 1e-5, |t, bound| {
            let enc = b.encode(t, bound, &x)?;
            let h = t.row(&[0.1, -0.3, 0.2, 0.5, -0.1, 0.0, 0.4, -0.2])?;
            let (w, ctx) = b.attention_score(t, bound, h, &enc)?;
            let a = t.sum(ctx)?;
            let sq = t.mul(w, w)?;
            let bsum = t.sum(sq)?;
            t.add(a, bsum)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
