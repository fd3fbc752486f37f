use rayon::prelude::*;

use super::Tensor;
use crate::real::Real;

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.grad = None;
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place<T: Real>(x: &mut Tensor<T>) {
    x.data.par_iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Backward through a ReLU given its *output*: passes `upstream` where the
/// output is positive. The subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(output: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let mut dx = upstream.clone();
    dx.grad = None;
    dx.data
        .par_iter_mut()
        .zip(output.data.par_iter())
        .for_each(|(d, &y)| {
            if y <= T::zero() {
                *d = T::zero()
            }
        });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{fd_grad, rel_err};

    #[test]
    fn clamps_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data, vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn backward_matches_finite_differences_away_from_zero() {
        let x = vec![-0.7, 0.4, 1.3, -0.2, 0.9];
        let u = vec![0.5, -1.5, 2.0, 1.0, 0.25];
        let loss = |v: &[f64]| -> f64 {
            let t = Tensor::from_vec(&[5], v.to_vec()).unwrap();
            relu(&t).data.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let y = relu(&Tensor::from_vec(&[5], x.clone()).unwrap());
        let dx = relu_backward(&y, &Tensor::from_vec(&[5], u.clone()).unwrap());
        assert!(rel_err(&dx.data, &fd_grad(&x, loss)) < 1e-6);
        let at_zero = relu_backward(
            &Tensor::from_vec(&[1], vec![0.0]).unwrap(),
            &Tensor::from_vec(&[1], vec![3.0]).unwrap(),
        );
        assert_eq!(at_zero.data, vec![0.0]);
    }
}
