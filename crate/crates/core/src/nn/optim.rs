//! Adam and SGD-with-momentum updates over a model's named parameters.

use super::{NnError, Parameterized, Tensor};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    /// First moment (Adam) or velocity (SGD), per parameter in visit order.
    first: Vec<Vec<T>>,
    /// Second moment (Adam only).
    second: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from the gradients stored in the parameters.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, model: &mut impl Parameterized<T>) -> Result<(), NnError> {
        let mut bad = None;
        let mut shapes = Vec::new();
        model.visit_params(&mut |name, t| {
            shapes.push(t.len());
            if bad.is_none() {
                match &t.grad {
                    Some(g) if g.iter().all(|v| v.is_finite()) => {}
                    Some(_) => bad = Some(name.to_string()),
                    None => bad = Some(format!("{name} (missing gradient)")),
                }
            }
        });
        if let Some(name) = bad {
            return Err(NnError::NonFiniteGradient(name));
        }
        if self.first.is_empty() {
            self.first = shapes.iter().map(|&n| vec![T::zero(); n]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = shapes.iter().map(|&n| vec![T::zero(); n]).collect();
            }
        } else if self.first.len() != shapes.len() || self.first.iter().zip(&shapes).any(|(m, &n)| m.len() != n) {
            return Err(NnError::Shape("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let lr = self.learning_rate;
        let t = self.step as i32;
        let kind = self.kind;
        let mut idx = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        model.visit_params_mut(&mut |_, p| {
            let g = p.grad.as_ref().expect("checked above");
            let m = &mut first[idx];
            match kind {
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    let v = &mut second[idx];
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let c1 = T::of(1.0 - beta1.powi(t));
                    let c2 = T::of(1.0 - beta2.powi(t));
                    for i in 0..p.data.len() {
                        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p.data[i] -= T::of(lr) * mh / (vh.sqrt() + T::of(epsilon));
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    for i in 0..p.data.len() {
                        m[i] = T::of(momentum) * m[i] + g[i];
                        p.data[i] -= T::of(lr) * m[i];
                    }
                }
            }
            idx += 1;
        });
        Ok(())
    }
}

/// Standalone update of a single tensor, mostly for tests and examples.
pub fn optimizer_step<T: Real>(param: &mut Tensor<T>, grad: &[T], opt: &mut Optimizer<T>) -> Result<(), NnError> {
    struct One<'a, T>(&'a mut Tensor<T>);
    impl<T: Real> Parameterized<T> for One<'_, T> {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
            f("param", self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
            f("param", self.0)
        }
    }
    param.grad = Some(grad.to_vec());
    opt.step(&mut One(param))
}
