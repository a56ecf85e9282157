//! Dense f32 tensors with reverse-mode differentiation.
//!
//! The numeric substrate for everything else in this crate: a flat row-major
//! tensor, a Wengert tape recording the forward pass, and the handful of
//! operations needed to train and re-optimize a small convolutional VAE
//! (convolution, transposed convolution, batch norm, reparameterized Gaussian
//! sampling, a 256-way categorical likelihood, and Adam).
//!
//! Production code runs entirely in `f32`; the whole module is generic over
//! [`Scalar`] so the test harness can instantiate `f64` for tight gradient
//! checks.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;

pub use adam::{Adam, AdamConfig, AdamState};
pub use gradcheck::check_gradients;
pub use params::{ParamRef, Parameter, Params};
pub use tape::{BnMode, Gradients, Tape, ValueId};

use rand::Rng;

use crate::{Error, Result};

/// log-sigma values are clamped to this symmetric range before exponentiation,
/// both in the sampling path and in the KL term.
pub const LOG_SIGMA_CLAMP: f64 = 7.0;

/// Element type of the numeric stack. Implemented for `f32` (production) and
/// `f64` (test-only tight gradient checks).
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    /// exp for bulk softmax work. The f32 version is a branch-free
    /// range-reduced polynomial (relative error < 3e-7) that the compiler
    /// can vectorize; f64 falls back to the libm exp.
    fn exp_approx(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;

    /// Draw from the standard normal distribution. `f32` and `f64` use their
    /// native sampler so each width has its own deterministic stream.
    fn standard_normal<R: Rng>(rng: &mut R) -> Self;

    /// C := alpha * A B + beta * C, row-major with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

#[inline]
fn exp_approx_f32(x: f32) -> f32 {
    let x = x.clamp(-87.3, 88.7);
    let k = (x * std::f32::consts::LOG2_E).round();
    // two-part ln2 keeps the reduced argument accurate
    let r = x - k * 0.693_359_375 - k * (-2.121_944_4e-4);
    let r2 = r * r;
    let mut p = 1.987_569_2e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let e = 1.0 + r + r2 * p;
    e * f32::from_bits((((k as i32) + 127) << 23) as u32)
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $exp_approx:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn exp_approx(self) -> Self {
                ($exp_approx)(self)
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }

            fn standard_normal<R: Rng>(rng: &mut R) -> Self {
                rng.sample::<$t, _>(rand_distr::StandardNormal)
            }

            #[inline]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, exp_approx_f32);
impl_scalar!(f64, matrixmultiply::dgemm, f64::exp);

/// Dense N-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, data has {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// i.i.d. normal entries, `mean + std * eps`.
    pub fn randn<R: Rng>(shape: &[usize], mean: S, std: S, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| mean + std * S::standard_normal(rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Single element of a scalar (rank-0 or one-element) tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Interpret as N x C x H x W.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn require_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    pub(crate) fn add_in_place(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }
}

impl<S: Scalar> std::ops::Index<usize> for Tensor<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.data[i]
    }
}
