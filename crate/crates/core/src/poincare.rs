//! Numerically safe Poincaré-ball operations (unit curvature).
//!
//! The ball model used throughout: points live strictly inside the unit
//! ball, the origin tangent space is plain Euclidean space, and
//!
//! ```text
//! exp_0(v) = tanh(|v|) * v / |v|
//! log_0(p) = atanh(|p|) * p / |p|
//! d(p, q)  = acosh(1 + 2|p-q|^2 / ((1-|p|^2)(1-|q|^2)))
//! ```
//!
//! All arithmetic is 64-bit; near-boundary points are clamped back to
//! radius `1 - EPS_BALL` so `atanh` and the distance denominator stay
//! well-conditioned.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::norm;

/// Margin kept between any stored point and the unit sphere.
pub const EPS_BALL: f64 = 1e-5;

/// Below this norm, exp/log skip the direction division and return zero.
pub const NORM_EPS: f64 = 1e-15;

/// Largest norm a valid ball point may carry.
pub const MAX_NORM: f64 = 1.0 - EPS_BALL;

// Validation slack: a projected point re-measures within a few ulps of
// MAX_NORM, which must not be rejected.
const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("input contains a non-finite entry")]
    NonFinite,
    #[error("point norm {norm} is outside the open ball (limit {limit})")]
    OutsideBall { norm: f64, limit: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// A vector strictly inside the unit ball.
#[derive(Clone, Debug, PartialEq)]
pub struct PoincarePoint {
    coords: Vec<f64>,
}

impl PoincarePoint {
    /// Validates raw coordinates: finite, norm at most `1 - EPS_BALL`.
    pub fn new(coords: Vec<f64>) -> Result<Self, GeometryError> {
        if !coords.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = norm(&coords);
        if n > MAX_NORM + NORM_SLACK {
            return Err(GeometryError::OutsideBall {
                norm: n,
                limit: MAX_NORM,
            });
        }
        Ok(PoincarePoint { coords })
    }

    pub fn origin(dim: usize) -> Self {
        PoincarePoint {
            coords: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }
}

/// A tangent vector at the origin. Finite entries, no norm constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
}

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self, GeometryError> {
        if !coords.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(TangentVector { coords })
    }

    pub fn zero(dim: usize) -> Self {
        TangentVector {
            coords: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }
}

/// Origin exponential map followed by the ball clamp.
pub fn exp_map_origin(v: &TangentVector) -> PoincarePoint {
    let mut out = vec![0.0; v.dim()];
    exp_map_into(&v.coords, &mut out);
    PoincarePoint { coords: out }
}

/// Origin logarithmic map; inverse of [`exp_map_origin`] on the interior.
pub fn log_map_origin(p: &PoincarePoint) -> TangentVector {
    let mut out = vec![0.0; p.dim()];
    log_map_into(&p.coords, &mut out);
    TangentVector { coords: out }
}

/// Geodesic distance between two interior points of equal dimension.
pub fn geodesic_distance(p: &PoincarePoint, q: &PoincarePoint) -> Result<f64, GeometryError> {
    if p.dim() != q.dim() {
        return Err(GeometryError::DimensionMismatch {
            left: p.dim(),
            right: q.dim(),
        });
    }
    Ok(dist_slices(&p.coords, &q.coords))
}

/// Rescales any finite vector into the closed ball of radius `1 - EPS_BALL`.
/// Interior vectors pass through unchanged.
pub fn project_to_ball(x: &[f64]) -> Result<PoincarePoint, GeometryError> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let mut out = x.to_vec();
    project_into(&mut out);
    Ok(PoincarePoint { coords: out })
}

// ---------------------------------------------------------------------------
// Slice-level kernels, shared with the autodiff tape.
// ---------------------------------------------------------------------------

pub(crate) fn project_into(x: &mut [f64]) {
    let n = norm(x);
    if n >= MAX_NORM {
        let s = MAX_NORM / n;
        for v in x.iter_mut() {
            *v *= s;
        }
    }
}

pub(crate) fn exp_map_into(v: &[f64], out: &mut [f64]) {
    let r = norm(v);
    if r < NORM_EPS {
        out.fill(0.0);
        return;
    }
    let s = libm::tanh(r) / r;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = s * x;
    }
    project_into(out);
}

pub(crate) fn log_map_into(p: &[f64], out: &mut [f64]) {
    let n = norm(p);
    if n < NORM_EPS {
        out.fill(0.0);
        return;
    }
    let t = libm::atanh(n.min(MAX_NORM)) / n;
    for (o, &x) in out.iter_mut().zip(p) {
        *o = t * x;
    }
}

pub(crate) fn dist_slices(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut diff_sq = 0.0;
    let mut p_sq = 0.0;
    let mut q_sq = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let d = a - b;
        diff_sq += d * d;
        p_sq += a * a;
        q_sq += b * b;
    }
    let denom = (1.0 - p_sq) * (1.0 - q_sq);
    let arg = 1.0 + 2.0 * diff_sq / denom;
    libm::acosh(arg.max(1.0))
}

/// Scale factor of the exp map, `tanh(r)/r`, stable through r = 0.
pub(crate) fn exp_scale(r: f64) -> f64 {
    if r < 1e-4 {
        1.0 - r * r / 3.0 + 2.0 * r * r * r * r / 15.0
    } else {
        libm::tanh(r) / r
    }
}

/// Derivative of `tanh(r)/r` with respect to r, stable through r = 0.
pub(crate) fn exp_scale_deriv(r: f64) -> f64 {
    if r < 1e-4 {
        -2.0 * r / 3.0 + 8.0 * r * r * r / 15.0
    } else {
        let th = libm::tanh(r);
        ((1.0 - th * th) * r - th) / (r * r)
    }
}

/// Scale factor of the log map, `atanh(n)/n`, stable through n = 0.
pub(crate) fn log_scale(n: f64) -> f64 {
    if n < 1e-4 {
        1.0 + n * n / 3.0 + n * n * n * n / 5.0
    } else {
        libm::atanh(n) / n
    }
}

/// Derivative of `atanh(n)/n` with respect to n, stable through n = 0.
pub(crate) fn log_scale_deriv(n: f64) -> f64 {
    if n < 1e-4 {
        2.0 * n / 3.0 + 4.0 * n * n * n / 5.0
    } else {
        (n / (1.0 - n * n) - libm::atanh(n)) / (n * n)
    }
}
