//! Minimal 3D convolutional network engine with hand-written backprop.
//!
//! Kernels operate on single items (channel-first `Array4`); batching is
//! done by the caller, which makes data-parallel training deterministic:
//! per-item gradients are reduced in index order regardless of worker count.
//! Everything is generic over `f32`/`f64` so gradients can be verified
//! against central finite differences in double precision.

pub mod conv;
pub mod norm;
pub mod unet;

use ndarray::{Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use conv::{Conv3d, ConvTranspose3d};
pub use norm::InstanceNorm;
pub use unet::{Tape, UNet};

/// Floating-point scalar usable by the kernels (f32 or f64).
pub trait Scalar:
    Float
    + FromPrimitive
    + ScalarOperand
    + LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Display
    + std::fmt::Debug
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn f(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

/// Per-parameter gradient buffers, flat, indexed like the network's
/// parameter registry.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub slots: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self { slots: sizes.iter().map(|&n| vec![F::zero(); n]).collect() }
    }

    /// Elementwise accumulate; slot layouts must match.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (a, b) in self.slots.iter_mut().zip(other.slots.iter()) {
            debug_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for slot in &mut self.slots {
            for x in slot.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Negative slope 0.01.
    LeakyRelu,
}

impl Activation {
    pub fn apply<F: Scalar>(&self, x: &mut Array4<F>) {
        let slope = self.slope::<F>();
        for v in x.iter_mut() {
            if *v < F::zero() {
                *v = *v * slope;
            }
        }
    }

    /// dA/dx given the activation *output* (sign-preserving for slope >= 0).
    pub fn backward<F: Scalar>(&self, out: &Array4<F>, dy: &mut Array4<F>) {
        let slope = self.slope::<F>();
        for (d, o) in dy.iter_mut().zip(out.iter()) {
            if *o <= F::zero() {
                *d = *d * slope;
            }
        }
    }

    fn slope<F: Scalar>(&self) -> F {
        match self {
            Activation::Relu => F::zero(),
            Activation::LeakyRelu => F::f(0.01),
        }
    }
}
