//! Planar states, controls, obstacles and the covariance-to-radius geometry
//! used by the collision constraints.

use serde::{Deserialize, Serialize};

use crate::scalar::{lit, wrap_angle, Real};

/// Planar position `[x, y]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct State2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> State2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Planar pose `[x, y, psi]`; heading kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct State3<T> {
    pub x: T,
    pub y: T,
    pub psi: T,
}

impl<T: Real> State3<T> {
    pub fn new(x: T, y: T, psi: T) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }

    pub fn position(&self) -> State2<T> {
        State2::new(self.x, self.y)
    }
}

/// World-frame planar velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Control2<T> {
    pub vx: T,
    pub vy: T,
}

impl<T: Real> Control2<T> {
    pub fn new(vx: T, vy: T) -> Self {
        Self { vx, vy }
    }
}

/// World-frame planar velocity plus yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Control3<T> {
    pub vx: T,
    pub vy: T,
    pub psi_dot: T,
}

impl<T: Real> Control3<T> {
    pub fn new(vx: T, vy: T, psi_dot: T) -> Self {
        Self { vx, vy, psi_dot }
    }

    /// Velocity expressed in a body frame rotated by `heading`.
    pub fn body_velocity(&self, heading: T) -> (T, T) {
        let (s, c) = heading.sin_cos();
        (c * self.vx + s * self.vy, -s * self.vx + c * self.vy)
    }
}

/// Full 2x2 planar position covariance, row-major `[[sxx, sxy], [syx, syy]]`.
///
/// The raw network output is an arbitrary flattened 2x2 matrix, so the
/// off-diagonals are stored separately and may disagree until corrected.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Covariance2<T> {
    pub sxx: T,
    pub sxy: T,
    pub syx: T,
    pub syy: T,
}

impl<T: Real> Covariance2<T> {
    pub fn new(sxx: T, sxy: T, syx: T, syy: T) -> Self {
        Self { sxx, sxy, syx, syy }
    }

    pub fn diag(sxx: T, syy: T) -> Self {
        Self::new(sxx, T::zero(), T::zero(), syy)
    }

    pub fn isotropic(s: T) -> Self {
        Self::diag(s, s)
    }

    pub fn zero() -> Self {
        Self::diag(T::zero(), T::zero())
    }

    pub fn from_flat(v: [T; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_flat(&self) -> [T; 4] {
        [self.sxx, self.sxy, self.syx, self.syy]
    }

    pub fn trace(&self) -> T {
        self.sxx + self.syy
    }

    /// Largest eigenvalue of the symmetric part.
    pub fn max_eigenvalue(&self) -> T {
        let half = lit::<T>(0.5);
        let off = half * (self.sxy + self.syx);
        if off == T::zero() {
            return self.sxx.max(self.syy);
        }
        let mean = half * (self.sxx + self.syy);
        let dev = half * (self.sxx - self.syy);
        mean + dev.hypot(off)
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_eigenvalue(&self) -> T {
        let half = lit::<T>(0.5);
        let off = half * (self.sxy + self.syx);
        if off == T::zero() {
            return self.sxx.min(self.syy);
        }
        let mean = half * (self.sxx + self.syy);
        let dev = half * (self.sxx - self.syy);
        mean - dev.hypot(off)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Planar disc obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle<T> {
    pub cx: T,
    pub cy: T,
    pub radius: T,
}

impl<T: Real> Obstacle<T> {
    pub fn new(cx: T, cy: T, radius: T) -> Self {
        debug_assert!(radius >= T::zero());
        Self { cx, cy, radius }
    }

    pub fn center(&self) -> State2<T> {
        State2::new(self.cx, self.cy)
    }
}

/// Physical robot radius plus the confidence scale applied to the
/// covariance major axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotGeometry<T> {
    pub body_radius: T,
    pub confidence_scale: T,
}

impl<T: Real> RobotGeometry<T> {
    pub fn new(body_radius: T, confidence_scale: T) -> Self {
        assert!(body_radius > T::zero(), "body radius must be positive");
        assert!(confidence_scale >= T::zero(), "confidence scale must be non-negative");
        Self {
            body_radius,
            confidence_scale,
        }
    }
}

/// Forces a raw covariance estimate to be symmetric PSD: off-diagonals are
/// zeroed and negative diagonal entries negated.
pub fn psd_correct<T: Real>(m: &Covariance2<T>) -> Covariance2<T> {
    Covariance2::diag(m.sxx.abs(), m.syy.abs())
}

/// Collision-boundary radius `body_radius + kappa * sqrt(lambda_max)`.
pub fn major_axis_radius<T: Real>(sigma: &Covariance2<T>, geom: &RobotGeometry<T>) -> T {
    let lambda = sigma.max_eigenvalue().max(T::zero());
    geom.body_radius + geom.confidence_scale * lambda.sqrt()
}

/// Left-hand side of the slacked collision constraint; `<= 0` is satisfied.
pub fn collision_margin<T: Real>(x: T, y: T, obs: &Obstacle<T>, r_sigma: T, eps: T) -> T {
    -(x - obs.cx).hypot(y - obs.cy) + r_sigma + obs.radius - eps
}
