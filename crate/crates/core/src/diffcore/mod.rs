//! Minimal reverse-mode differentiable numerics.
//!
//! Matrices live on a [`Tape`]; parameters live in a [`ParamStore`] and are
//! re-bound to a fresh tape for every forward pass. [`grad_check`] compares
//! tape gradients against central differences.

mod optim;
mod param;
mod tape;

pub use optim::SgdMomentum;
pub use param::{Bound, Grads, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, softmax_into, softplus, Matrix, Tape, EPS_PROB};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("class index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("matrix belongs to a different tape")]
    ForeignTape,
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
}

/// Weights of one LSTM cell. Gate columns are ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// `(input + hidden) × 4·hidden`
    pub weight: Matrix,
    /// `1 × 4·hidden`
    pub bias: Matrix,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.bias.cols() / 4
    }
}

/// One step of the standard LSTM recurrence on row vectors.
pub fn lstm_step(
    tape: &mut Tape,
    x: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
    p: &LstmParams,
) -> Result<(Matrix, Matrix), DiffError> {
    let hd = p.hidden();
    if h_prev.shape() != (1, hd) || c_prev.shape() != (1, hd) || x.rows() != 1 {
        return Err(DiffError::Shape {
            op: "lstm_step",
            lhs: h_prev.shape(),
            rhs: (1, hd),
        });
    }
    if p.weight.rows() != x.cols() + hd || p.weight.cols() != 4 * hd {
        return Err(DiffError::Shape {
            op: "lstm_step",
            lhs: p.weight.shape(),
            rhs: (x.cols() + hd, 4 * hd),
        });
    }
    let xh = tape.concat_cols(&[x, h_prev])?;
    let pre = tape.matmul(xh, p.weight)?;
    let pre = tape.add(pre, p.bias)?;
    let i = tape.slice_cols(pre, 0, hd)?;
    let f = tape.slice_cols(pre, hd, 2 * hd)?;
    let g = tape.slice_cols(pre, 2 * hd, 3 * hd)?;
    let o = tape.slice_cols(pre, 3 * hd, 4 * hd)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let ct = tape.tanh(c)?;
    let h = tape.mul(o, ct)?;
    Ok((h, c))
}

/// `x · w + b` for a row-vector (or row-stacked) input.
pub fn linear(tape: &mut Tape, x: Matrix, w: Matrix, b: Matrix) -> Result<Matrix, DiffError> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every trainable
/// element of `store`, with central differences of step `h`.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<f64, DiffError>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Matrix, DiffError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = {
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape)?;
        let out = f(&mut tape, &bound)?;
        if !out.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        tape.backward(out)?;
        bound.grads(&tape)
    };
    let mut eval = |store: &ParamStore| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false)?;
        let out = f(&mut tape, &bound)?;
        let v = tape.scalar_value(out);
        if !v.is_finite() {
            return Err(DiffError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).values[k];
            store.get_mut(id).values[k] = orig + h;
            let up = eval(store);
            store.get_mut(id).values[k] = orig - h;
            let down = eval(store);
            store.get_mut(id).values[k] = orig;
            let numeric = (up? - down?) / (2.0 * h);
            let a = analytic.get(id)[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
