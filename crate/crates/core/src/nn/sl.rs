//! Separable linear layer `Z -> W1 Z W2 + B`.
//!
//! `W1` mixes rows (the pixel/feature axis), `W2` mixes columns (the
//! similarity axis). The map equals the dense layer `(W2^T kron W1) vec(Z) + vec(B)`
//! with column-major `vec`, at a fraction of the parameters.

use rayon::prelude::*;

use super::linalg::{chunked_sum, gemm, gemm_nt, gemm_tn};
use super::{NnError, Tensor};
use crate::real::Real;

/// Parameters of one separable linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SepLinear<T> {
    /// `out_rows x in_rows`.
    pub w1: Tensor<T>,
    /// `in_cols x out_cols`.
    pub w2: Tensor<T>,
    /// `out_rows x out_cols`.
    pub b: Tensor<T>,
}

/// Parameter gradients of a [`SepLinear`].
#[derive(Clone, Debug, PartialEq)]
pub struct SlGrads<T> {
    pub w1: Vec<T>,
    pub w2: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> SepLinear<T> {
    pub fn new(w1: Tensor<T>, w2: Tensor<T>, b: Tensor<T>) -> Result<Self, NnError> {
        let layer = SepLinear { w1, w2, b };
        layer.validate()?;
        Ok(layer)
    }

    pub fn zeros(in_rows: usize, out_rows: usize, in_cols: usize, out_cols: usize) -> Self {
        SepLinear {
            w1: Tensor::param(&[out_rows, in_rows], vec![T::zero(); out_rows * in_rows]),
            w2: Tensor::param(&[in_cols, out_cols], vec![T::zero(); in_cols * out_cols]),
            b: Tensor::param(&[out_rows, out_cols], vec![T::zero(); out_rows * out_cols]),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.w1.dims.len() == 2
            && self.w2.dims.len() == 2
            && self.b.dims.len() == 2
            && self.b.dims[0] == self.w1.dims[0]
            && self.b.dims[1] == self.w2.dims[1];
        if ok {
            Ok(())
        } else {
            Err(NnError::Shape(format!(
                "inconsistent SL shapes W1 {:?}, W2 {:?}, B {:?}",
                self.w1.dims, self.w2.dims, self.b.dims
            )))
        }
    }

    pub fn in_rows(&self) -> usize {
        self.w1.dims[1]
    }

    pub fn out_rows(&self) -> usize {
        self.w1.dims[0]
    }

    pub fn in_cols(&self) -> usize {
        self.w2.dims[0]
    }

    pub fn out_cols(&self) -> usize {
        self.w2.dims[1]
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len() + self.b.len()
    }

    fn check_input(&self, rows: usize, cols: usize) -> Result<(), NnError> {
        if rows != self.in_rows() || cols != self.in_cols() {
            return Err(NnError::Shape(format!(
                "SL layer expects {}x{} input, got {rows}x{cols}",
                self.in_rows(),
                self.in_cols()
            )));
        }
        Ok(())
    }

    /// One matrix: `out = W1 z W2 + B`. `tmp` holds `z W2` (`in_rows x out_cols`).
    pub fn forward_one(&self, z: &[T], tmp: &mut [T], out: &mut [T]) {
        let (ir, ic, or, oc) = (self.in_rows(), self.in_cols(), self.out_rows(), self.out_cols());
        gemm(z, &self.w2.data, tmp, ir, ic, oc, false);
        out.copy_from_slice(&self.b.data);
        gemm(&self.w1.data, tmp, out, or, ir, oc, true);
    }

    /// Applies the layer to every item of a `[count, in_rows, in_cols]` batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (count, rows, cols) = x.batch_dims();
        self.check_input(rows, cols)?;
        let (or, oc) = (self.out_rows(), self.out_cols());
        let mut out = Tensor::zeros(&[count, or, oc]);
        if count == 0 {
            return Ok(out);
        }
        out.data
            .par_chunks_mut(or * oc)
            .zip(x.data.par_chunks(rows * cols))
            .for_each_init(
                || vec![T::zero(); rows * oc],
                |tmp, (o, z)| self.forward_one(z, tmp, o),
            );
        Ok(out)
    }

    /// Input gradient and summed parameter gradients for a batch.
    ///
    /// `dZ = W1^T U W2^T`, `dW1 = U (Z W2)^T`, `dW2 = (W1 Z)^T U`, `dB = U`.
    pub fn backward(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, SlGrads<T>), NnError> {
        let (count, rows, cols) = x.batch_dims();
        self.check_input(rows, cols)?;
        let (ir, ic, or, oc) = (self.in_rows(), self.in_cols(), self.out_rows(), self.out_cols());
        let (ucount, urows, ucols) = upstream.batch_dims();
        if ucount != count || urows != or || ucols != oc {
            return Err(NnError::Shape(format!(
                "SL upstream gradient is {ucount}x{urows}x{ucols}, expected {count}x{or}x{oc}"
            )));
        }
        let mut dx = Tensor::zeros(&[count, ir, ic]);
        dx.data
            .par_chunks_mut(ir * ic)
            .zip(upstream.data.par_chunks(or * oc))
            .for_each_init(
                || vec![T::zero(); ir * oc],
                |t1, (d, u)| {
                    gemm_tn(&self.w1.data, u, t1, ir, or, oc, false);
                    gemm_nt(t1, &self.w2.data, d, ir, oc, ic, false);
                },
            );
        let (n1, n2) = (or * ir, ic * oc);
        let packed = chunked_sum(count, n1 + n2 + or * oc, |range, acc| {
            let mut tmp = vec![T::zero(); ir * oc];
            let mut t1 = vec![T::zero(); ir * oc];
            for i in range {
                let z = x.item(i);
                let u = upstream.item(i);
                gemm(z, &self.w2.data, &mut tmp, ir, ic, oc, false);
                gemm_nt(u, &tmp, &mut acc[..n1], or, oc, ir, true);
                gemm_tn(&self.w1.data, u, &mut t1, ir, or, oc, false);
                gemm_tn(z, &t1, &mut acc[n1..n1 + n2], ic, ir, oc, true);
                for (a, &v) in acc[n1 + n2..].iter_mut().zip(u) {
                    *a += v;
                }
            }
        });
        let grads = SlGrads {
            w1: packed[..n1].to_vec(),
            w2: packed[n1..n1 + n2].to_vec(),
            b: packed[n1 + n2..].to_vec(),
        };
        Ok((dx, grads))
    }

    pub fn accumulate(&mut self, g: &SlGrads<T>) {
        self.w1.add_grad(&g.w1);
        self.w2.add_grad(&g.w2);
        self.b.add_grad(&g.b);
    }
}

/// Single-matrix forward on a `rows x cols` tensor.
pub fn sl_forward<T: Real>(z: &Tensor<T>, p: &SepLinear<T>) -> Result<Tensor<T>, NnError> {
    let (_, r, c) = z.batch_dims();
    let batch = Tensor::from_vec(&[1, r, c], z.data.clone())?;
    let mut out = p.forward(&batch)?;
    out.dims.remove(0);
    Ok(out)
}

/// Single-matrix backward: `(dZ, grads)`.
pub fn sl_backward<T: Real>(
    upstream: &Tensor<T>,
    z: &Tensor<T>,
    p: &SepLinear<T>,
) -> Result<(Tensor<T>, SlGrads<T>), NnError> {
    let (_, r, c) = z.batch_dims();
    let (_, ur, uc) = upstream.batch_dims();
    let batch = Tensor::from_vec(&[1, r, c], z.data.clone())?;
    let up = Tensor::from_vec(&[1, ur, uc], upstream.data.clone())?;
    let (mut dz, g) = p.backward(&batch, &up)?;
    dz.dims.remove(0);
    Ok((dz, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{fd_grad, rand_tensor, rel_err};

    /// `(W2^T kron W1) vec(Z) + vec(B)` with column-major vec, built densely.
    fn kronecker_oracle(p: &SepLinear<f64>, z: &[f64]) -> Vec<f64> {
        let (ir, ic, or, oc) = (p.in_rows(), p.in_cols(), p.out_rows(), p.out_cols());
        let rows = or * oc;
        let cols = ir * ic;
        let mut k = vec![0.0; rows * cols];
        for a in 0..oc {
            for b in 0..ic {
                // Block (a, b) of W2^T kron W1 is W2[b, a] * W1.
                let s = p.w2.data[b * oc + a];
                for i in 0..or {
                    for j in 0..ir {
                        k[(a * or + i) * cols + b * ir + j] = s * p.w1.data[i * ir + j];
                    }
                }
            }
        }
        let vec_z: Vec<f64> = (0..cols).map(|q| z[(q % ir) * ic + q / ir]).collect();
        let mut out = vec![0.0; or * oc];
        for r in 0..rows {
            let v: f64 = (0..cols).map(|q| k[r * cols + q] * vec_z[q]).sum::<f64>() + p.b.data[(r % or) * oc + r / or];
            out[(r % or) * oc + r / or] = v;
        }
        out
    }

    fn random_layer(ir: usize, or: usize, ic: usize, oc: usize, seed: u64) -> SepLinear<f64> {
        SepLinear::new(
            rand_tensor(&[or, ir], seed),
            rand_tensor(&[ic, oc], seed + 1),
            rand_tensor(&[or, oc], seed + 2),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_zero_input() {
        let p = SepLinear::new(Tensor::identity(3), Tensor::identity(2), Tensor::zeros(&[3, 2])).unwrap();
        let z = rand_tensor(&[3, 2], 1);
        assert_eq!(sl_forward(&z, &p).unwrap().data, z.data);
        let q = random_layer(3, 4, 2, 5, 3);
        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(sl_forward(&zero, &q).unwrap().data, q.b.data);
        assert!(sl_forward(&Tensor::<f64>::zeros(&[2, 2]), &q).is_err());
    }

    #[test]
    fn matches_kronecker_construction() {
        let p = random_layer(3, 4, 2, 5, 11);
        let z = rand_tensor(&[3, 2], 12);
        let out = sl_forward(&z, &p).unwrap();
        for (a, b) in out.data.iter().zip(kronecker_oracle(&p, &z.data)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = random_layer(5, 3, 4, 6, 20);
        let z = rand_tensor(&[5, 4], 21);
        let u = rand_tensor(&[3, 6], 22);
        let loss = |p: &SepLinear<f64>, z: &Tensor<f64>| -> f64 {
            sl_forward(z, p).unwrap().data.iter().zip(&u.data).map(|(a, b)| a * b).sum()
        };
        let (dz, g) = sl_backward(&u, &z, &p).unwrap();
        let fz = fd_grad(&z.data, |v| loss(&p, &Tensor::from_vec(&[5, 4], v.to_vec()).unwrap()));
        assert!(rel_err(&dz.data, &fz) < 1e-6);
        let f1 = fd_grad(&p.w1.data, |v| {
            let mut q = p.clone();
            q.w1.data = v.to_vec();
            loss(&q, &z)
        });
        assert!(rel_err(&g.w1, &f1) < 1e-6);
        let f2 = fd_grad(&p.w2.data, |v| {
            let mut q = p.clone();
            q.w2.data = v.to_vec();
            loss(&q, &z)
        });
        assert!(rel_err(&g.w2, &f2) < 1e-6);
        assert_eq!(g.b, u.data);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_layer(4, 3, 2, 2, 5);
        let z = rand_tensor(&[4, 2], 6);
        let (dz, g) = sl_backward(&Tensor::zeros(&[3, 2]), &z, &p).unwrap();
        assert!(dz.data.iter().chain(&g.w1).chain(&g.w2).chain(&g.b).all(|&v| v == 0.0));
    }
}
