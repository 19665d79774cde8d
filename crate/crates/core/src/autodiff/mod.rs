//! Minimal reverse-mode automatic differentiation.
//!
//! Forward values are computed eagerly while every primitive application is
//! appended to a [`Tape`]. [`Tape::backward`] replays the tape once in reverse
//! order and returns a [`Gradients`] table. `stop_gradient` nodes pass values
//! through unchanged and are treated as constants by the backward pass.
//!
//! The primitive set is closed:
//!
//! | primitive     | arity | broadcasting                  | derivative                               |
//! |---------------|-------|-------------------------------|------------------------------------------|
//! | `add`         | 2     | equal shape or scalar⊕tensor  | `g`, `g`                                 |
//! | `sub`         | 2     | equal shape or scalar⊕tensor  | `g`, `-g`                                |
//! | `mul`         | 2     | equal shape or scalar⊕tensor  | `g·b`, `g·a`                             |
//! | `div`         | 2     | equal shape or scalar⊕tensor  | `g/b`, `-g·a/b²`                         |
//! | `matmul`      | 2     | `[m,k]×[k,n]`                 | `g·bᵀ`, `aᵀ·g`                           |
//! | `conv2d`      | 2–3   | `[Ci,H,W]`, `[Co,Ci,3,3]`, `[Co]` | 3×3 stride 1 zero-pad 1 correlation adjoint |
//! | `relu`        | 1     | –                             | `g·[x>0]`                                |
//! | `sigmoid`     | 1     | –                             | `g·s·(1-s)`                              |
//! | `exp`         | 1     | –                             | `g·exp(x)`                               |
//! | `log`         | 1     | –                             | `g/x` for `x>1e-12`, else 0 (guarded)    |
//! | `sum`         | 1     | reduces to scalar             | `g` broadcast                            |
//! | `mean`        | 1     | reduces to scalar             | `g/n` broadcast                          |
//! | `max_reduce`  | 1     | reduces leading axis          | `g` routed to argmax (ties: lowest index)|
//! | `softmax`     | 1     | over last axis                | `y·(g - Σ g·y)`                          |
//! | `squared_l2`  | 1     | reduces to scalar             | `2·x·g`                                  |
//! | `concat`      | n≥1   | leading axis, scalars as `[1]`| slices of `g`                            |
//! | `reshape`     | 1     | element count preserved       | `g` reshaped                             |
//!
//! A tensor with exactly one element acts as a scalar for broadcasting.
//! `stop_gradient` is not a primitive in the table above; it is an identity
//! with zero derivative.

mod gradcheck;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, GradCheckMode};
pub use tape::{Gradients, ParamId, PrimitiveKind, Tape, Var};
pub use tensor::Tensor;

/// Floating point element type used by tapes.
pub trait Real: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Global numeric precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Lower clamp applied inside `log`.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, len: usize },
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("primitive {op} expects {expected} operands, got {got}")]
    Arity {
        op: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite gradient at node {node}")]
    NonFiniteGradient { node: usize },
    #[error("gradient check: {0}")]
    GradCheck(String),
    #[error("stop-gradient replay exhausted after {0} values")]
    ReplayExhausted(usize),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
