//! Dense tensors with a reverse-mode tape, the Adam optimizer and a
//! finite-difference gradient checker.
//!
//! Values are row-major. The element type is generic over [`Float`] so the
//! same code trains in `f32` and verifies gradients in `f64`.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use gradcheck::{grad_check, relative_error};
pub use optim::{adam_step, noam_lr, AdamConfig, AdamState};
pub use tape::{AttnMask, Grads, Tape, Var};

use crate::error::{bail, Result};

/// Scalar element type of every tensor.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width in bits, 32 or 64.
    const BITS: u32;

    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c += a · b` for strided `a[m×k]`, `b[k×n]`, `c[m×n]`; strides are
    /// `[row, column]` in elements. Callers check the buffer extents.
    fn gemm_strided(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]);
}

impl Float for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm_strided(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]) {
        // SAFETY: the kernels in `kernels` assert that every strided index
        // stays inside its slice.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], 1.0, c.as_mut_ptr(), sc[0], sc[1]);
        }
    }
}

impl Float for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm_strided(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]) {
        // SAFETY: the kernels in `kernels` assert that every strided index
        // stays inside its slice.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], 1.0, c.as_mut_ptr(), sc[0], sc[1]);
        }
    }
}

/// A dense n-dimensional array with an optional gradient buffer.
///
/// An empty shape is a scalar holding one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Shape, "dimensions must be positive, got {shape:?}");
        }
        if numel(shape) != data.len() {
            bail!(
                Shape,
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.contains(&0), "dimensions must be positive");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::new(shape, data).expect("from_fn shape")
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    /// Repeated calls accumulate; call [`Tensor::zero_grad`] to reset.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            bail!(
                Shape,
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            );
        }
        if !self.requires_grad {
            return Ok(());
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another precision.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&v| U::lit(v.as_f64())).collect()),
        }
    }

    /// Reinterprets the data with a new shape of the same size.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            bail!(Shape, "cannot reshape {:?} to {shape:?}", self.shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a 2-D index.
    pub fn at2(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Bitwise equality of shape and values, ignoring gradient state.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Plain (tape-free) matrix product, used where no gradient is needed.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let va = tape.constant(a);
    let vb = tape.constant(b);
    let out = tape.matmul(va, vb)?;
    Ok(tape.to_tensor(out))
}

/// Plain softmax over the last axis.
pub fn softmax<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = tape.softmax(v)?;
    Ok(tape.to_tensor(out))
}

/// Plain layer normalization over the last axis.
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    offset: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    let vg = tape.constant(gain);
    let vo = tape.constant(offset);
    let out = tape.layer_norm(vx, vg, vo, eps)?;
    Ok(tape.to_tensor(out))
}
