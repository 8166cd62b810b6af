//! Dense tensor storage for forward evaluation and reverse-mode gradients.
//!
//! A [`Tensor`] is a cheaply cloneable handle (`Rc`) onto shape + values +
//! an optional gradient buffer. Ranks 1 and 2 cover everything this model
//! needs; a scalar is any tensor with a single element. Graphs built over
//! tensors are confined to one thread (handles are deliberately not `Send`);
//! cross-thread work uses independent graph instances.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes incompatible for the named op. Reports both shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Stored value count does not match the shape product.
    InvalidShape { shape: Vec<usize>, len: usize },
    /// An op required a scalar (single-element) tensor.
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// log of a non-positive value.
    LogDomain { value: f64 },
    /// A contract violation that is not a pure shape issue.
    Contract(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::InvalidShape { shape, len } => {
                write!(f, "shape {shape:?} does not describe {len} values")
            }
            TensorError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar tensor, got shape {shape:?}")
            }
            TensorError::LogDomain { value } => {
                write!(f, "log of non-positive value {value}")
            }
            TensorError::Contract(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for TensorError {}

pub(crate) fn contract(msg: String) -> TensorError {
    TensorError::Contract(msg)
}

struct Inner<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

/// Handle to a dense real-valued tensor. Cloning shares storage.
pub struct Tensor<S: Scalar>(Rc<RefCell<Inner<S>>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Tensor{{shape: {:?}, requires_grad: {}}}",
            inner.shape, inner.requires_grad
        )
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape,
                len: values.len(),
            });
        }
        Ok(Tensor(Rc::new(RefCell::new(Inner {
            shape,
            values,
            grad: None,
            requires_grad: false,
        }))))
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<S>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<S>) -> Self {
        let n = values.len();
        Tensor::new(vec![n.max(1)], values).expect("vector shape always valid")
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar shape always valid")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![S::ZERO; numel]).expect("zeros shape from numel")
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![v; numel]).expect("filled shape from numel")
    }

    /// Marks this tensor as a trainable leaf and returns it.
    pub fn as_param(self) -> Self {
        self.0.borrow_mut().requires_grad = true;
        self
    }

    /// Stable identity of the underlying storage.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as *const u8 as usize
    }

    pub fn same_storage(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Rows/cols view: rank-1 `[n]` counts as one row of `n` columns.
    pub fn dims2(&self) -> (usize, usize) {
        let inner = self.0.borrow();
        match inner.shape.len() {
            1 => (1, inner.shape[0]),
            2 => (inner.shape[0], inner.shape[1]),
            _ => (inner.values.len(), 1),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.borrow().values.clone()
    }

    /// Single value of a scalar tensor.
    pub fn item(&self) -> S {
        let inner = self.0.borrow();
        debug_assert_eq!(inner.values.len(), 1, "item() on non-scalar");
        inner.values[0]
    }

    pub fn get(&self, i: usize) -> S {
        self.0.borrow().values[i]
    }

    pub fn set(&self, i: usize, v: S) {
        self.0.borrow_mut().values[i] = v;
    }

    pub fn fill(&self, v: S) {
        for x in self.0.borrow_mut().values.iter_mut() {
            *x = v;
        }
    }

    pub fn set_data(&self, values: &[S]) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.values.len(), values.len(), "set_data length mismatch");
        inner.values.copy_from_slice(values);
    }

    /// Runs `f` over the raw values without cloning them.
    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.0.borrow().values)
    }

    pub fn all_finite(&self) -> bool {
        self.0.borrow().values.iter().all(|v| v.is_finite())
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    /// Repeated contributions from multiple uses of a value sum here.
    pub fn accumulate_grad(&self, delta: &[S]) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(inner.values.len(), delta.len(), "gradient length mismatch");
        match inner.grad.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    /// In-place `values -= rate * update`, used by optimizers.
    pub fn apply_update(&self, update: &[S], rate: S) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(inner.values.len(), update.len());
        for (v, u) in inner.values.iter_mut().zip(update) {
            *v -= rate * *u;
        }
    }

    /// Detached copy: same shape and values, fresh storage, no grad.
    pub fn detached(&self) -> Tensor<S> {
        let inner = self.0.borrow();
        Tensor::new(inner.shape.clone(), inner.values.clone()).expect("detached copy")
    }
}

/// Shape equality check shared by the elementwise ops.
pub(crate) fn require_same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_len() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_across_uses() {
        let t = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 0.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn clone_shares_storage_detach_does_not() {
        let t = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let alias = t.clone();
        let copy = t.detached();
        t.set(0, 9.0);
        assert_eq!(alias.get(0), 9.0);
        assert_eq!(copy.get(0), 1.0);
        assert!(t.same_storage(&alias));
        assert!(!t.same_storage(&copy));
    }
}
