//! Dense row-major tensors and the reverse-mode differentiation tape.
//!
//! The module is split in three layers:
//!
//! * [`Tensor`] — a plain value type (shape + flat storage) used everywhere
//!   data moves without gradients: datasets, metrics, checkpoints,
//!   optimizer state.
//! * [`Tape`] — the compute graph. Operations append topologically ordered
//!   records; [`Tape::backward`] replays them in reverse to fill gradients.
//! * [`check_gradients`] — a finite-difference harness used by the test
//!   suite to validate every analytic gradient against central differences.
//!
//! All kernels are precision-generic over [`Element`] (`f32`/`f64`).
//! Training runs in `f32`; gradient verification instantiates the same code
//! in `f64`. There is no implicit broadcasting anywhere: binary operations
//! require identical shapes, and intent is spelled out with `reshape` /
//! `expand`.

mod conv;
mod gradcheck;
mod tape;

pub use gradcheck::check_gradients;
pub use tape::{finite_checks_enabled, Tape, TensorId};

use std::fmt::{Debug, Display};

use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar types the numeric kernels are generic over.
///
/// `from_f64`/`as_f64` are explicit (rather than leaning on `NumCast`) so
/// conversions in hot loops stay free of `Option` plumbing.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (identity for `f64`).
    fn from_f64(v: f64) -> Self;
    /// Widening conversion to `f64` (identity for `f64`).
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Number of elements implied by a shape (empty shape = scalar = 1).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// A dense row-major tensor: shape plus flat storage.
///
/// This is the passive value type. It does not track gradients; lift it
/// onto a [`Tape`] with [`Tape::leaf`] or [`Tape::constant`] to
/// differentiate through it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Build from parts, validating that the storage matches the shape.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {:?} implies {} elements but storage holds {}",
            shape,
            numel(&shape),
            data.len()
        );
        Tensor { shape, data }
    }

    /// All-zeros tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Standard-normal samples. Draws in `f64` and narrows, so a given RNG
    /// stream produces the same underlying values in both precisions.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                T::from_f64(v)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform samples on `[lo, hi)`, drawn in `f64` and narrowed.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// View the same storage under a new shape with equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(&self.shape),
            numel(shape),
            "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
            self.shape,
            numel(&self.shape),
            shape,
            numel(shape)
        );
        self.shape = shape.to_vec();
        self
    }

    /// Elementwise map into a (possibly different-precision) tensor.
    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert precision by round-tripping through `f64`.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.as_f64()))
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
