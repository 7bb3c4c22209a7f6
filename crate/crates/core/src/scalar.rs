//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (pooling, encoder towers, losses, the transformer, the
//! index) is generic over [`Scalar`] so the same code runs in f32 or f64.
//! The crate root exports f64-specialized aliases, which is what the CLI
//! pipeline uses.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for writing f64 literals in generic code.
#[inline]
pub fn cast<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 literal representable in scalar type")
}
