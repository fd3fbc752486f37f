//! Fully connected layer `y = W x + b` applied to every vector of a batch.

use rayon::prelude::*;

use super::linalg::{chunked_sum, gemm_tn};
use super::{NnError, Tensor};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `out x in`.
    pub w: Tensor<T>,
    /// `out`.
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcGrads<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self, NnError> {
        if w.dims.len() != 2 || b.dims != [w.dims[0]] {
            return Err(NnError::Shape(format!("FC shapes W {:?}, b {:?}", w.dims, b.dims)));
        }
        Ok(Linear { w, b })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            w: Tensor::param(&[outputs, inputs], vec![T::zero(); outputs * inputs]),
            b: Tensor::param(&[outputs], vec![T::zero(); outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.dims[1]
    }

    pub fn outputs(&self) -> usize {
        self.w.dims[0]
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize, NnError> {
        let (count, rows, cols) = x.batch_dims();
        if rows != self.inputs() || cols != 1 {
            return Err(NnError::Shape(format!(
                "FC layer expects {}-vectors, got {rows}x{cols}",
                self.inputs()
            )));
        }
        Ok(count)
    }

    /// `x: [count, in, 1] -> [count, out, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let count = self.check(x)?;
        let (ni, no) = (self.inputs(), self.outputs());
        let mut out = Tensor::zeros(&[count, no, 1]);
        out.data
            .par_chunks_mut(no)
            .zip(x.data.par_chunks(ni))
            .for_each(|(y, v)| {
                for (o, yo) in y.iter_mut().enumerate() {
                    let row = &self.w.data[o * ni..(o + 1) * ni];
                    *yo = self.b.data[o] + row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
                }
            });
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, FcGrads<T>), NnError> {
        let count = self.check(x)?;
        let (ni, no) = (self.inputs(), self.outputs());
        if upstream.batch_dims() != (count, no, 1) {
            return Err(NnError::Shape(format!(
                "FC upstream gradient {:?}, expected [{count}, {no}, 1]",
                upstream.dims
            )));
        }
        let mut dx = Tensor::zeros(&[count, ni, 1]);
        dx.data
            .par_chunks_mut(ni)
            .zip(upstream.data.par_chunks(no))
            .for_each(|(d, u)| gemm_tn(&self.w.data, u, d, ni, no, 1, false));
        let packed = chunked_sum(count, no * ni + no, |range, acc| {
            for i in range {
                let v = x.item(i);
                let u = upstream.item(i);
                for o in 0..no {
                    let uo = u[o];
                    for (a, &vi) in acc[o * ni..(o + 1) * ni].iter_mut().zip(v) {
                        *a += uo * vi;
                    }
                    acc[no * ni + o] += uo;
                }
            }
        });
        Ok((
            dx,
            FcGrads {
                w: packed[..no * ni].to_vec(),
                b: packed[no * ni..].to_vec(),
            },
        ))
    }

    pub fn accumulate(&mut self, g: &FcGrads<T>) {
        self.w.add_grad(&g.w);
        self.b.add_grad(&g.b);
    }
}

/// Single-vector forward.
pub fn fc_forward<T: Real>(x: &[T], layer: &Linear<T>) -> Result<Vec<T>, NnError> {
    let t = Tensor::from_vec(&[1, x.len(), 1], x.to_vec())?;
    Ok(layer.forward(&t)?.data)
}

/// Single-vector backward: `(dx, grads)`.
pub fn fc_backward<T: Real>(upstream: &[T], x: &[T], layer: &Linear<T>) -> Result<(Vec<T>, FcGrads<T>), NnError> {
    let t = Tensor::from_vec(&[1, x.len(), 1], x.to_vec())?;
    let u = Tensor::from_vec(&[1, upstream.len(), 1], upstream.to_vec())?;
    let (dx, g) = layer.backward(&t, &u)?;
    Ok((dx.data, g))
}
