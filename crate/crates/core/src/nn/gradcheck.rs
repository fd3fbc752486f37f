//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::Parameterized;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many random coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-6,
            max_coords_per_tensor: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub tolerance: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compares gradients written by `analytic` against central differences of `loss`.
///
/// `analytic` must zero the gradient slots, run forward and backward on the
/// model and return the loss; `loss` evaluates the same objective without
/// touching gradients. Parameters are restored exactly after each probe.
pub fn grad_check<M: Parameterized<f64>>(
    model: &mut M,
    analytic: impl Fn(&mut M) -> f64,
    loss: impl Fn(&M) -> f64,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    analytic(model);
    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, t| {
        tensors.push((name.to_string(), t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()])))
    });
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        ..Default::default()
    };
    for (ti, (name, grad)) in tensors.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(cap) if cap < grad.len() => {
                let mut v = sample(&mut rng, grad.len(), cap).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..grad.len()).collect(),
        };
        for i in coords {
            let original = nudge(model, ti, i, None);
            nudge(model, ti, i, Some(original + opts.step));
            let up = loss(model);
            nudge(model, ti, i, Some(original - opts.step));
            let down = loss(model);
            nudge(model, ti, i, Some(original));
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = name.clone();
            }
            if !(rel < opts.tolerance) {
                report.failures.push(GradFailure {
                    tensor: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}

/// Reads coordinate `index` of the `tensor`-th parameter, optionally overwriting it.
fn nudge<M: Parameterized<f64>>(model: &mut M, tensor: usize, index: usize, value: Option<f64>) -> f64 {
    let mut seen = 0;
    let mut old = 0.0;
    model.visit_params_mut(&mut |_, t| {
        if seen == tensor {
            old = t.data[index];
            if let Some(v) = value {
                t.data[index] = v;
            }
        }
        seen += 1;
    });
    old
}
