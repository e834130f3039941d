//! Minimal reverse-mode automatic differentiation over dense N-d arrays.
//!
//! A [`Tensor`] is a cheaply cloneable handle to shape + contiguous values,
//! plus optional gradient storage. Differentiable operations are methods on
//! [`Tape`], which records a node per op and replays them in reverse. The
//! tape is rebuilt on every forward pass (define-by-run): the architecture
//! changes every iteration under edge sampling, so there is nothing to cache.

pub mod kernels;
mod tape;

pub use tape::{BnStats, ConvSpec, PoolKind, Tape};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct Inner<T> {
    shape: Vec<usize>,
    values: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    /// False for tensors produced by a tape op; such tensors route gradient
    /// even when `requires_grad` is off.
    leaf: bool,
}

/// Handle to a dense N-d float array with optional gradient.
pub struct Tensor<T> {
    inner: Rc<Inner<T>>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, values: Vec<T>, requires_grad: bool, leaf: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel != values.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} expects {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                leaf,
            }),
        })
    }

    pub fn from_vec(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        Self::build(shape, values, false, true)
    }

    /// Leaf tensor that accumulates gradients (a learnable parameter).
    pub fn param(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        Self::build(shape, values, true, true)
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<T>) -> Self {
        Self::build(shape, values, false, false).expect("op produced inconsistent shape")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![T::zero(); n], false, true).expect("invalid shape")
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![value; n], false, true).expect("invalid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false, true).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// (N, C, H, W) view of the shape; errors unless rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.inner.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!("expected NCHW tensor, got shape {:?}", self.inner.shape))),
        }
    }

    pub fn values(&self) -> Ref<'_, Vec<T>> {
        self.inner.values.borrow()
    }

    pub fn values_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.values.borrow().clone()
    }

    pub fn item(&self) -> T {
        self.inner.values.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    pub(crate) fn is_leaf(&self) -> bool {
        self.inner.leaf
    }

    /// Gradient routing: does this tensor participate in backward at all?
    pub(crate) fn tracked(&self) -> bool {
        self.inner.requires_grad.get() || !self.inner.leaf
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Drops any accumulated gradient (gradient reset is explicit).
    pub fn reset_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn seed_grad_ones(&self) {
        let n = self.numel();
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![T::zero(); n]);
        for v in buf.iter_mut() {
            *v += T::one();
        }
    }

    /// Stable address used as an identity key during backward.
    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.values.borrow().iter().all(|v| v.is_finite())
    }

    /// Bit patterns of the values (via exact widening), for bitwise-equality tests.
    pub fn value_bits(&self) -> Vec<u64> {
        self.inner.values.borrow().iter().map(|v| v.to_f64_lossy().to_bits()).collect()
    }
}

/// Backward-pass gradient router.
///
/// Gradients of intermediate (non-leaf) tensors flow through a scratch map
/// that lives only for the duration of one `backward` call; gradients of
/// `requires_grad` leaves accumulate into the tensor itself. Plain constants
/// are skipped entirely.
pub(crate) struct GradFlow<T> {
    map: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> GradFlow<T> {
    pub(crate) fn new() -> Self {
        GradFlow { map: HashMap::new() }
    }

    pub(crate) fn seed(&mut self, t: &Tensor<T>) {
        if t.is_leaf() {
            t.seed_grad_ones();
        } else {
            let n = t.numel();
            let buf = self.map.entry(t.key()).or_insert_with(|| vec![T::zero(); n]);
            for v in buf.iter_mut() {
                *v += T::one();
            }
        }
    }

    /// Removes and returns the flowing gradient of an op output, if any
    /// gradient reached it. Ownership transfer is safe: in reverse order all
    /// consumers have already run.
    pub(crate) fn take(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        self.map.remove(&t.key())
    }

    /// Accumulates into `t`'s gradient through `f`, which receives the
    /// (zero-initialized on first touch) gradient buffer. No-op for
    /// untracked constants.
    pub(crate) fn accum(&mut self, t: &Tensor<T>, f: impl FnOnce(&mut [T])) {
        if t.requires_grad() {
            let n = t.numel();
            let mut g = t.inner.grad.borrow_mut();
            let buf = g.get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        } else if !t.is_leaf() {
            let n = t.numel();
            let buf = self.map.entry(t.key()).or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_value_mismatch_is_rejected() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f64; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f64; 6]).is_ok());
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(Tensor::<f64>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_reset_is_explicit() {
        let t = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.grad().is_none());
        t.seed_grad_ones();
        assert_eq!(t.grad().unwrap(), vec![1.0, 1.0]);
        t.seed_grad_ones();
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0]);
        t.reset_grad();
        assert!(t.grad().is_none());
    }
}
