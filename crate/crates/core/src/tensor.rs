use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional value array, row-major, with an optional gradient
/// buffer of the same shape. 4-D tensors use (batch, channel, height, width)
/// layout.
///
/// Cloning is cheap: clones share storage. A tensor is confined to one
/// thread while a forward/backward pass over it is in flight.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<TensorData<S>>>,
}

pub struct TensorData<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    /// Present iff `requires_grad`.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from an explicit shape and row-major values.
    pub fn from_shape_vec(shape: &[usize], values: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} expected {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self::new_unchecked(shape.to_vec(), values, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![S::zero(); numel], false)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: S) -> Self {
        Self::new_unchecked(vec![1], vec![value], false)
    }

    fn new_unchecked(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        let grad = requires_grad.then(|| vec![S::zero(); data.len()]);
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                requires_grad,
                grad,
            })),
        }
    }

    /// Mark this tensor as a trainable leaf; allocates the gradient buffer.
    pub fn requires_grad(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&self, on: bool) {
        let mut d = self.inner.borrow_mut();
        d.requires_grad = on;
        if on {
            if d.grad.is_none() {
                d.grad = Some(vec![S::zero(); d.data.len()]);
            }
        } else {
            d.grad = None;
        }
    }

    pub fn wants_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, TensorData<S>> {
        self.inner.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, TensorData<S>> {
        self.inner.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    pub fn grad_vec(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on tensor with {} elements", d.data.len());
        d.data[0]
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn accumulate_grad(&self, contribution: &[S]) {
        let mut d = self.inner.borrow_mut();
        if !d.requires_grad {
            return;
        }
        let g = d.grad.as_mut().expect("grad buffer present when requires_grad");
        debug_assert_eq!(g.len(), contribution.len());
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += *ci;
        }
    }

    /// Replace contents in place; shape must be unchanged.
    pub fn copy_from(&self, values: &[S]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), values.len());
        d.data.copy_from_slice(values);
    }

    /// Deep copy with fresh storage.
    pub fn detached_copy(&self) -> Tensor<S> {
        let d = self.inner.borrow();
        Self::new_unchecked(d.shape.clone(), d.data.clone(), false)
    }

    /// Stable identity of the shared storage, used to dedupe graph leaves.
    pub(crate) fn storage_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            d.shape, d.requires_grad
        )
    }
}

/// Split a 4-D shape into (batch, channels, height, width).
pub fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("expected 4-D shape, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_shape_vec_identity() {
        let t = Tensor::<f32>::from_shape_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.shape(), vec![1, 1, 2, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(!t.wants_grad());
    }

    #[test]
    fn from_shape_vec_zero_vector() {
        let t = Tensor::<f32>::from_shape_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(t.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn from_shape_vec_length_mismatch_names_both_sizes() {
        let err = Tensor::<f32>::from_shape_vec(&[1, 3, 2, 2], vec![0.0; 11]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 12 values"), "{msg}");
        assert!(msg.contains("got 11"), "{msg}");
    }

    #[test]
    fn grad_buffer_present_iff_requires_grad() {
        let t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.grad_vec().is_none());
        let t = t.requires_grad();
        assert_eq!(t.grad_vec().unwrap(), vec![0.0; 4]);
        t.set_requires_grad(false);
        assert!(t.grad_vec().is_none());
    }
}
