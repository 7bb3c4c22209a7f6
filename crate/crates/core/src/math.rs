//! Dense matrix/vector helpers for the hand-rolled numeric core.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{cast, Scalar};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    /// Uniform init in [-bound, bound].
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| cast::<S>(rng.gen_range(-bound..=bound))).collect();
        Matrix { rows, cols, data }
    }

    /// Gaussian init with the given standard deviation.
    pub fn gaussian<R: Rng>(rows: usize, cols: usize, sigma: f64, rng: &mut R) -> Self {
        // Box-Muller keeps us off rand_distr for one distribution.
        let mut data = Vec::with_capacity(rows * cols);
        while data.len() < rows * cols {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(cast::<S>(r * theta.cos() * sigma));
            if data.len() < rows * cols {
                data.push(cast::<S>(r * theta.sin() * sigma));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        let start = r * self.cols;
        &self.data[start..start + self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let start = r * self.cols;
        &mut self.data[start..start + self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    /// y = M x  (len(x) = cols, len(y) = rows)
    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// y = Mᵀ x  (len(x) = rows, len(y) = cols)
    pub fn matvec_t(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![S::zero(); self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            for (yc, &m) in y.iter_mut().zip(self.row(r)) {
                *yc += m * xr;
            }
        }
        y
    }

    /// M += a ⊗ b  (rank-1 accumulate; len(a) = rows, len(b) = cols)
    pub fn add_outer(&mut self, a: &[S], b: &[S]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for r in 0..self.rows {
            let ar = a[r];
            for (m, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *m += ar * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

/// Normalizes in place and returns the pre-normalization norm (clamped away
/// from zero so the all-zero edge stays finite).
pub fn normalize<S: Scalar>(v: &mut [S]) -> S {
    let norm = l2_norm(v).max(cast(1e-12));
    for x in v.iter_mut() {
        *x /= norm;
    }
    norm
}

pub fn add_assign<S: Scalar>(acc: &mut [S], v: &[S]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

pub fn add_scaled<S: Scalar>(acc: &mut [S], v: &[S], c: S) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b * c;
    }
}

pub fn scale<S: Scalar>(v: &mut [S], c: S) {
    for x in v.iter_mut() {
        *x *= c;
    }
}

/// Mean of the rows of an iterator of equal-length vectors; zero vector of
/// the given dimension when the iterator is empty.
pub fn mean_of<'a, S: Scalar>(dim: usize, rows: impl Iterator<Item = &'a [S]>) -> Vec<S> {
    let mut acc = vec![S::zero(); dim];
    let mut n = 0usize;
    for row in rows {
        add_assign(&mut acc, row);
        n += 1;
    }
    if n > 0 {
        scale(&mut acc, S::one() / cast(n as f64));
    }
    acc
}

/// Sums addends in value-sorted order.
///
/// Reductions over attention's sequence axis go through this so that the
/// result depends only on the multiset of addends, not on slot order;
/// that keeps content-level permutation invariance exact at the bit level.
/// The buffer is consumed (sorted in place).
pub fn canonical_sum<S: Scalar>(buf: &mut Vec<S>) -> S {
    // NaN addends sort as equal and poison the sum, which is the honest
    // answer; they must not panic mid-training
    buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut acc = S::zero();
    for &x in buf.iter() {
        acc += x;
    }
    acc
}

/// Softmax over `logits` restricted to indices where `active` is true.
/// Inactive entries come back as exactly zero. The denominator is a
/// canonical-order sum (see [`canonical_sum`]).
pub fn masked_softmax<S: Scalar>(logits: &[S], active: &[bool], scratch: &mut Vec<S>) -> Vec<S> {
    debug_assert_eq!(logits.len(), active.len());
    let mut max = S::neg_infinity();
    for (i, &l) in logits.iter().enumerate() {
        if active[i] && l > max {
            max = l;
        }
    }
    let mut out = vec![S::zero(); logits.len()];
    if max == S::neg_infinity() {
        return out;
    }
    scratch.clear();
    for (i, &l) in logits.iter().enumerate() {
        if active[i] {
            let e = (l - max).exp();
            out[i] = e;
            scratch.push(e);
        }
    }
    let denom = canonical_sum(scratch);
    for (i, o) in out.iter_mut().enumerate() {
        if active[i] {
            *o /= denom;
        }
    }
    out
}

/// Parameter-block plumbing shared by trainable models and their gradient
/// mirrors (a gradient is just a zeroed clone of the model structure).
pub trait Params<S: Scalar>: Clone {
    fn param_count(&self) -> usize;
    fn for_each_param(&self, f: &mut dyn FnMut(S));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut S));

    /// self += c * other, blockwise over identical structures.
    fn add_scaled_params(&mut self, other: &Self, c: S);

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(&mut |p| *p = S::zero());
        z
    }

    fn scale_params(&mut self, c: S) {
        self.for_each_param_mut(&mut |p| *p *= c);
    }

    fn flatten_params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |p| out.push(p));
        out
    }

    /// Adds eps to the idx-th parameter in iteration order.
    fn nudge_param(&mut self, idx: usize, eps: S) {
        let mut i = 0usize;
        self.for_each_param_mut(&mut |p| {
            if i == idx {
                *p += eps;
            }
            i += 1;
        });
    }

    fn params_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(&mut |p| ok &= p.is_finite());
        ok
    }
}

/// Implements [`Params`] for a struct generic over one scalar `S` by listing
/// its parameter-bearing fields in iteration order.
#[macro_export]
macro_rules! impl_params_fields {
    ($ty:ident, $($field:ident),+ $(,)?) => {
        impl<S: $crate::scalar::Scalar> $crate::math::Params<S> for $ty<S> {
            fn param_count(&self) -> usize {
                0 $(+ $crate::math::Params::param_count(&self.$field))+
            }
            fn for_each_param(&self, f: &mut dyn FnMut(S)) {
                $($crate::math::Params::for_each_param(&self.$field, f);)+
            }
            fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut S)) {
                $($crate::math::Params::for_each_param_mut(&mut self.$field, f);)+
            }
            fn add_scaled_params(&mut self, other: &Self, c: S) {
                $($crate::math::Params::add_scaled_params(&mut self.$field, &other.$field, c);)+
            }
        }
    };
}

impl<S: Scalar> Params<S> for Matrix<S> {
    fn param_count(&self) -> usize {
        self.data.len()
    }

    fn for_each_param(&self, f: &mut dyn FnMut(S)) {
        for &p in &self.data {
            f(p);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut S)) {
        for p in &mut self.data {
            f(p);
        }
    }

    fn add_scaled_params(&mut self, other: &Self, c: S) {
        debug_assert_eq!(self.data.len(), other.data.len());
        add_scaled(&mut self.data, &other.data, c);
    }
}

impl<S: Scalar> Params<S> for Vec<S> {
    fn param_count(&self) -> usize {
        self.len()
    }

    fn for_each_param(&self, f: &mut dyn FnMut(S)) {
        for &p in self {
            f(p);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut S)) {
        for p in self {
            f(p);
        }
    }

    fn add_scaled_params(&mut self, other: &Self, c: S) {
        add_scaled(self, other, c);
    }
}
