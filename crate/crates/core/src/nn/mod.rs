//! Dense tensors and the hand-differentiated layers the network is built from.
//!
//! There is no tape: every layer exposes `forward` and `backward`, and the
//! network schedules the backward calls itself.

mod activation;
mod bn;
mod fc;
pub mod gradcheck;
pub mod linalg;
mod optim;
mod sl;
mod tensor;
#[cfg(test)]
pub(crate) mod testutil;

use thiserror::Error;

pub use activation::{relu, relu_backward, relu_in_place};
pub use bn::{BatchNorm, BnCache, BnGrads, BnStats, Mode, BN_EPSILON, BN_MOMENTUM};
pub use fc::{fc_backward, fc_forward, FcGrads, Linear};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GradFailure};
pub use optim::{optimizer_step, Optimizer, OptimizerKind};
pub use sl::{sl_backward, sl_forward, SepLinear, SlGrads};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
}

/// Anything holding named learnable tensors, visited in a fixed order.
pub trait Parameterized<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

impl<T> Parameterized<T> for SepLinear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w1", &self.w1);
        f("w2", &self.w2);
        f("b", &self.b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w1", &mut self.w1);
        f("w2", &mut self.w2);
        f("b", &mut self.b);
    }
}
