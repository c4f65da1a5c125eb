use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DiffError, Matrix, Tape};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable block of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Architecture-level flag: non-trainable parameters are never bound as
    /// gradient leaves and are excluded from parameter counts.
    pub trainable: bool,
}

impl Parameter {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Owns every parameter of a model. Names are unique.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        if rows * cols != values.len() {
            return Err(DiffError::Shape {
                op: "parameter",
                lhs: (rows, cols),
                rhs: (values.len(), 1),
            });
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            rows,
            cols,
            values,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    /// Adds a parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId, DiffError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, rows, cols, values)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Rebuilds the name index after deserialisation.
    pub fn reindex(&mut self) -> Result<(), DiffError> {
        self.index.clear();
        for (i, p) in self.params.iter().enumerate() {
            if self.index.insert(p.name.clone(), i).is_some() {
                return Err(DiffError::DuplicateParameter(p.name.clone()));
            }
        }
        Ok(())
    }

    /// Trainable scalar count over parameters whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(Parameter::len)
            .sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of matching parameters.
    pub fn hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            h.update((p.rows as u64).to_le_bytes());
            h.update((p.cols as u64).to_le_bytes());
            for v in &p.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every parameter on `tape`. Parameters accepted by `active`
    /// (and marked trainable) become gradient leaves; the rest are constants.
    pub fn bind(&self, tape: &mut Tape, active: impl Fn(&Parameter) -> bool) -> Result<Bound, DiffError> {
        let mut mats = Vec::with_capacity(self.params.len());
        let mut live = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let grad = p.trainable && active(p);
            mats.push(tape.leaf(p.rows, p.cols, p.values.clone(), grad)?);
            live.push(grad);
        }
        Ok(Bound { mats, live })
    }

    /// Binds with every trainable parameter live.
    pub fn bind_all(&self, tape: &mut Tape) -> Result<Bound, DiffError> {
        self.bind(tape, |_| true)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    mats: Vec<Matrix>,
    live: Vec<bool>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Matrix {
        self.mats[id.0]
    }

    pub fn is_live(&self, id: ParamId) -> bool {
        self.live[id.0]
    }

    /// Gradient buffers shaped like the store, read back after `backward`.
    pub fn grads(&self, tape: &Tape) -> Grads {
        Grads(
            self.mats
                .iter()
                .zip(&self.live)
                .map(|(m, live)| if *live { tape.grad(*m) } else { vec![0.0; m.len()] })
                .collect(),
        )
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Matrix;
    fn index(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }
}

/// One gradient buffer per parameter, same shapes as the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        self.0[id.0].iter().all(|x| *x == 0.0)
    }
}
