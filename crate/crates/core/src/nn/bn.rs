//! Batch normalization over feature rows.
//!
//! Input is a `[count, channels, cols]` batch; each row index is a channel and
//! its statistics pool every column of every item.

use rayon::prelude::*;

use super::linalg::chunked_sum;
use super::{NnError, Tensor};
use crate::real::Real;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages get updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    /// Buffers, not trained.
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Batch statistics produced by a training-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// What the backward pass needs.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrads<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            scale: Tensor::param(&[channels], vec![T::one(); channels]),
            shift: Tensor::param(&[channels], vec![T::zero(); channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape"),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Learnable parameters (scale and shift).
    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize), NnError> {
        let (count, rows, cols) = x.batch_dims();
        if rows != self.channels() {
            return Err(NnError::Shape(format!(
                "batch norm over {} channels got {rows} rows",
                self.channels()
            )));
        }
        Ok((count, cols))
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>, Option<BnStats<T>>), NnError> {
        let (count, cols) = self.check(x)?;
        let ch = self.channels();
        let m = count * cols;
        let (mean, inv_std, stats) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(NnError::Shape(
                        "training-mode batch norm needs at least 2 columns".into(),
                    ));
                }
                let mt = T::of(m as f64);
                let sums = chunked_sum(count, ch, |range, acc: &mut [T]| {
                    for i in range {
                        for (c, row) in x.item(i).chunks_exact(cols).enumerate() {
                            acc[c] += row.iter().copied().sum::<T>();
                        }
                    }
                });
                let mean: Vec<T> = sums.iter().map(|&s| s / mt).collect();
                let sq = chunked_sum(count, ch, |range, acc: &mut [T]| {
                    for i in range {
                        for (c, row) in x.item(i).chunks_exact(cols).enumerate() {
                            acc[c] += row.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                        }
                    }
                });
                let var: Vec<T> = sq.iter().map(|&s| s / mt).collect();
                let eps = T::of(self.epsilon);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let unbiased: Vec<T> = var.iter().map(|&v| v * mt / T::of((m - 1) as f64)).collect();
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv_std, Some(stats))
            }
            Mode::Eval => {
                let eps = T::of(self.epsilon);
                let inv_std = self
                    .running_var
                    .data
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (self.running_mean.data.clone(), inv_std, None)
            }
        };
        let mut xhat = Tensor::zeros(&x.dims);
        let mut y = Tensor::zeros(&x.dims);
        let item = ch * cols;
        if item > 0 {
            xhat.data
                .par_chunks_mut(item)
                .zip(y.data.par_chunks_mut(item))
                .zip(x.data.par_chunks(item))
                .for_each(|((xh, yo), xi)| {
                    for c in 0..ch {
                        let (g, b) = (self.scale.data[c], self.shift.data[c]);
                        for j in c * cols..(c + 1) * cols {
                            let h = (xi[j] - mean[c]) * inv_std[c];
                            xh[j] = h;
                            yo[j] = g * h + b;
                        }
                    }
                });
        }
        Ok((y, BnCache { mode, xhat, inv_std }, stats))
    }

    pub fn backward(&self, cache: &BnCache<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, BnGrads<T>), NnError> {
        let (count, cols) = self.check(upstream)?;
        let ch = self.channels();
        let item = ch * cols;
        let packed = chunked_sum(count, 2 * ch, |range, acc| {
            for i in range {
                let u = upstream.item(i);
                let h = cache.xhat.item(i);
                for c in 0..ch {
                    for j in c * cols..(c + 1) * cols {
                        acc[c] += u[j] * h[j];
                        acc[ch + c] += u[j];
                    }
                }
            }
        });
        let (dscale, dshift) = packed.split_at(ch);
        let mut dx = Tensor::zeros(&upstream.dims);
        let mt = T::of((count * cols) as f64);
        if item > 0 {
            dx.data
                .par_chunks_mut(item)
                .zip(upstream.data.par_chunks(item))
                .zip(cache.xhat.data.par_chunks(item))
                .for_each(|((d, u), h)| {
                    for c in 0..ch {
                        let g = self.scale.data[c];
                        let s = cache.inv_std[c];
                        for j in c * cols..(c + 1) * cols {
                            d[j] = match cache.mode {
                                Mode::Train => g * s * (u[j] - dshift[c] / mt - h[j] * dscale[c] / mt),
                                Mode::Eval => g * s * u[j],
                            };
                        }
                    }
                });
        }
        Ok((
            dx,
            BnGrads {
                scale: dscale.to_vec(),
                shift: dshift.to_vec(),
            },
        ))
    }

    pub fn update_running(&mut self, stats: &BnStats<T>) {
        let mom = T::of(self.momentum);
        let keep = T::one() - mom;
        for (r, &m) in self.running_mean.data.iter_mut().zip(&stats.mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in self.running_var.data.iter_mut().zip(&stats.var) {
            *r = keep * *r + mom * v;
        }
    }

    pub fn accumulate(&mut self, g: &BnGrads<T>) {
        self.scale.add_grad(&g.scale);
        self.shift.add_grad(&g.shift);
    }
}
