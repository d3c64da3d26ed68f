use super::Scalar;
use crate::error::{Error, Result};

/// Row-major dense array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); n]).expect("zeros: valid shape")
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    /// Marks the tensor as a trainable leaf and allocates its gradient.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![T::zero(); self.data.len()]);
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient accumulator. No-op for tensors that do
    /// not require gradients.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        let Some(g) = &mut self.grad else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(Error::shape(format!(
                "gradient of {} elements for tensor of {}",
                delta.len(),
                g.len()
            )));
        }
        for (a, &d) in g.iter_mut().zip(delta) {
            *a = *a + d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise precision conversion. The gradient flag is kept, the
    /// accumulator is reset.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let mut out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(Scalar::to_f64(*v))).collect(),
            requires_grad: false,
            grad: None,
        };
        out.set_requires_grad(self.requires_grad);
        out
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}
