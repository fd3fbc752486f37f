use crate::real::Real;

use super::NnError;

/// Dense array of rank at most 3 with an optional gradient buffer.
///
/// Batched activations use dims `[count, rows, cols]`, each item a row-major
/// `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() <= 3, "rank {} exceeds 3", dims.len());
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self, NnError> {
        if dims.len() > 3 {
            return Err(NnError::Shape(format!("rank {} exceeds 3", dims.len())));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(NnError::Shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    /// A learnable tensor: same as `from_vec` plus a zeroed gradient slot.
    pub fn param(dims: &[usize], data: Vec<T>) -> Self {
        let mut t = Self::from_vec(dims, data).expect("parameter shape");
        t.grad = Some(vec![T::zero(); t.data.len()]);
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(count, rows, cols)` view of a rank-3 batch.
    pub fn batch_dims(&self) -> (usize, usize, usize) {
        match self.dims[..] {
            [c, r, k] => (c, r, k),
            [r, k] => (1, r, k),
            [r] => (1, r, 1),
            _ => (1, 1, 1),
        }
    }

    pub fn item(&self, i: usize) -> &[T] {
        let (_, r, c) = self.batch_dims();
        &self.data[i * r * c..(i + 1) * r * c]
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn add_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        let slot = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (a, &b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
        }
    }
}
