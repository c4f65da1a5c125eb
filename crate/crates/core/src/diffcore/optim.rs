use super::{Grads, ParamStore, Parameter};

/// Stochastic gradient descent with heavy-ball momentum and global-norm clipping.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            learning_rate,
            momentum,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to the parameters accepted by `active`. Gradients of
    /// other parameters are ignored, including in the clipping norm.
    /// Returns the pre-clip global norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, active: impl Fn(&Parameter) -> bool) -> f64 {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        let mask: Vec<bool> = store.iter().map(|(_, p)| p.trainable && active(p)).collect();
        let norm = grads
            .0
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .flat_map(|(g, _)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !mask[id.0] {
                continue;
            }
            let v = &mut self.velocity[id.0];
            let p = store.get_mut(id);
            for ((w, vel), g) in p.values.iter_mut().zip(v.iter_mut()).zip(&grads.0[id.0]) {
                *vel = self.momentum * *vel + factor * g;
                *w -= self.learning_rate * *vel;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;

    #[test]
    fn descends_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("x", 1, 1, vec![3.0]).unwrap();
        let mut opt = SgdMomentum::new(0.05, 0.9, None);
        for _ in 0..300 {
            let mut t = Tape::new();
            let b = s.bind_all(&mut t).unwrap();
            let sq = t.mul(b[id], b[id]).unwrap();
            t.backward(sq).unwrap();
            opt.step(&mut s, &b.grads(&t), |_| true);
        }
        assert!(s.get(id).values[0].abs() < 1e-3);
    }

    #[test]
    fn inactive_parameters_are_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("a", 1, 1, vec![1.0]).unwrap();
        let b = s.add("b", 1, 1, vec![1.0]).unwrap();
        let grads = Grads(vec![vec![1.0], vec![1.0]]);
        let mut opt = SgdMomentum::new(0.1, 0.9, None);
        opt.step(&mut s, &grads, |p| p.name == "a");
        assert_eq!(s.get(b).values[0], 1.0);
        assert!((s.get(a).values[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn clipping_limits_step() {
        let mut s = ParamStore::new();
        let a = s.add("a", 1, 2, vec![0.0, 0.0]).unwrap();
        let grads = Grads(vec![vec![30.0, 40.0]]);
        let mut opt = SgdMomentum::new(1.0, 0.0, Some(5.0));
        let norm = opt.step(&mut s, &grads, |_| true);
        assert_eq!(norm, 50.0);
        let v = &s.get(a).values;
        assert!((v[0] + 3.0).abs() < 1e-12 && (v[1] + 4.0).abs() < 1e-12);
    }
}
