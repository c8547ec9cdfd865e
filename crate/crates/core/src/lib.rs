//! Truncated nonlocal gradient calculus on uniform Cartesian grids.
//!
//! The library discretizes the horizon-truncated Riesz-type gradient
//! `D^s_delta` and its companion operators (nonlocal divergence, the
//! convolution kernel `Q^s_delta`, the product-rule operator `K^{s,delta}`)
//! on box domains, verifies the exact identities they satisfy (duality,
//! product rules, Piola identity, integration by parts of the determinant,
//! weak-continuity surrogates), and minimizes polyconvex hyperelastic
//! energies under volumetric Dirichlet conditions.
//!
//! All numerics are generic over the scalar type through the [`Real`]
//! trait (`f32` or `f64`); concrete `f64` aliases are exported at the
//! crate root. Quantitative tolerances in the test suite assume `f64`.

#![allow(clippy::needless_range_loop)] // stencil loops index several parallel arrays

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

pub mod calculus;
pub mod energy;
pub mod functions;
pub mod grid;
pub mod kernels;
pub mod operators;
pub mod solve;

/// Scalar type the whole crate is generic over.
///
/// Blanket-implemented for every float that satisfies the bounds, which in
/// practice means `f32` and `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant must convert")
    }
}

impl<T> Real for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + NumAssign
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular evaluation: {0}")]
    Singularity(String),
    #[error("field does not live on the operator's grid")]
    GridMismatch,
    #[error("operator kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("field shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("support violation: {0}")]
    SupportViolation(String),
    #[error("non-finite energy at node {node}")]
    NonFiniteEnergy { node: usize },
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid binary format: {0}")]
    InvalidFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use calculus::IdentityReport;
pub use energy::{MinorVector, StoredEnergy};
pub use grid::{BoxDomain, Field, FieldKind, Grid, NodeClass, Support};
pub use kernels::{KernelParams, RadialProfile};
pub use operators::{ConvolutionOperator, GradientOperator, KVariant, NonlocalOperator};
pub use solve::{DirichletProblem, OptimizerConfig, SolveReport};

/// Concrete `f64` aliases for the two supported spatial dimensions.
pub type KernelParams2 = KernelParams<f64>;
pub type Grid2 = Grid<f64, 2>;
pub type Grid3 = Grid<f64, 3>;
pub type Field2 = Field<f64, 2>;
pub type Field3 = Field<f64, 3>;
pub type GradientOperator2 = GradientOperator<f64, 2>;
pub type GradientOperator3 = GradientOperator<f64, 3>;
pub type ConvolutionOperator2 = ConvolutionOperator<f64, 2>;
pub type ConvolutionOperator3 = ConvolutionOperator<f64, 3>;
pub type DirichletProblem2 = DirichletProblem<f64, 2>;
pub type DirichletProblem3 = DirichletProblem<f64, 3>;

pub(crate) mod la {
    //! Small fixed-size vector/matrix helpers shared across modules.

    use crate::Real;

    pub fn dot<R: Real, const N: usize>(a: &[R; N], b: &[R; N]) -> R {
        let mut acc = R::zero();
        for i in 0..N {
            acc += a[i] * b[i];
        }
        acc
    }

    pub fn norm<R: Real, const N: usize>(a: &[R; N]) -> R {
        dot(a, a).sqrt()
    }

    pub fn matvec<R: Real, const N: usize>(m: &[[R; N]; N], v: &[R; N]) -> [R; N] {
        let mut out = [R::zero(); N];
        for i in 0..N {
            out[i] = dot(&m[i], v);
        }
        out
    }

    pub fn frobenius<R: Real, const N: usize>(a: &[[R; N]; N], b: &[[R; N]; N]) -> R {
        let mut acc = R::zero();
        for i in 0..N {
            for j in 0..N {
                acc += a[i][j] * b[i][j];
            }
        }
        acc
    }

    pub fn frobenius_norm<R: Real, const N: usize>(a: &[[R; N]; N]) -> R {
        frobenius(a, a).sqrt()
    }
}
