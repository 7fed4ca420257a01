//! First-order update rules over a [`ParamStore`]. Pruned entries are never
//! updated; the store re-imposes its masks after every step regardless.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    steps: u64,
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr` from the gradients currently
    /// accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: S) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => store.update_with(|_, values, grads, mask| {
                for (i, (v, &g)) in values.iter_mut().zip(grads).enumerate() {
                    if mask.is_none_or(|m| m[i]) {
                        *v -= lr * g;
                    }
                }
            }),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
                let t = i32::try_from(self.steps).unwrap_or(i32::MAX);
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                let moments = &mut self.moments;
                store.update_with(|name, values, grads, mask| {
                    let (m, v) = moments.entry(name.to_string()).or_insert_with(|| {
                        (vec![S::zero(); values.len()], vec![S::zero(); values.len()])
                    });
                    for i in 0..values.len() {
                        if mask.is_some_and(|mk| !mk[i]) {
                            continue;
                        }
                        let g = grads[i];
                        m[i] = b1 * m[i] + (S::one() - b1) * g;
                        v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        values[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;
    use std::sync::Arc;

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut s = ParamStore::<f64>::new();
        s.insert("v", Tensor::vector(vec![2.0, 0.0]), ParamKind::Weight);
        s.accumulate_grad("v", &Tensor::vector(vec![2.0, 0.0]))
            .unwrap();
        Optimizer::new(OptimizerKind::Sgd).step(&mut s, 0.1);
        assert_eq!(s.value("v").unwrap().data(), &[1.8, 0.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("v", Tensor::vector(vec![1.0, -1.0]), ParamKind::Weight);
        s.accumulate_grad("v", &Tensor::vector(vec![3.0, -0.01]))
            .unwrap();
        Optimizer::new(OptimizerKind::adam()).step(&mut s, 0.5);
        let v = s.value("v").unwrap().data();
        assert!((v[0] - 0.5).abs() < 1e-6);
        assert!((v[1] + 0.5).abs() < 1e-4);
    }

    #[test]
    fn masked_entries_never_move() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut s = ParamStore::<f64>::new();
            s.insert("w", Tensor::vector(vec![1.0, 1.0, 1.0]), ParamKind::Weight);
            s.attach_mask("w", Arc::new(vec![true, false, true]))
                .unwrap();
            let mut opt = Optimizer::new(kind);
            for _ in 0..100 {
                s.zero_grad();
                s.accumulate_grad("w", &Tensor::vector(vec![0.3, 0.3, -0.3]))
                    .unwrap();
                opt.step(&mut s, 0.01);
            }
            assert_eq!(s.value("w").unwrap().data()[1].to_bits(), 0.0f64.to_bits());
            assert_eq!(s.nnz(), 2);
        }
    }
}
