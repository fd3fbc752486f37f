use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::Tensor;

pub fn rand_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let len = dims.iter().product();
    Tensor::from_vec(dims, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences with `h = 1e-5` of `f` at `x`.
pub fn fd_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + h;
            let up = f(&v);
            v[i] = x[i] - h;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest element-wise relative error, floored at `1e-6` in the denominator.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
