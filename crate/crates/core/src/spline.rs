//! Cubic Hermite reference segments between planner waypoints `k` and `k+2`.

use thiserror::Error;

use crate::geometry::{Control2, Control3, State2, State3};
use crate::scalar::{lit, wrap_angle, Real};

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("segment duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("sample period {dt} must lie in (0, {duration}]")]
    BadSamplePeriod { dt: f64, duration: f64 },
}

/// One-dimensional cubic `a0 + a1 t + a2 t^2 + a3 t^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cubic<T> {
    pub a: [T; 4],
}

impl<T: Real> Cubic<T> {
    /// Hermite interpolant with `p(0) = p0, p'(0) = v0, p(T) = p1, p'(T) = v1`.
    pub fn hermite(p0: T, v0: T, p1: T, v1: T, duration: T) -> Self {
        let t = duration;
        let (two, three) = (lit::<T>(2.0), lit::<T>(3.0));
        let a2 = (three * (p1 - p0) - (two * v0 + v1) * t) / (t * t);
        let a3 = (two * (p0 - p1) + (v0 + v1) * t) / (t * t * t);
        Self {
            a: [p0, v0, a2, a3],
        }
    }

    pub fn eval(&self, t: T) -> T {
        let [a0, a1, a2, a3] = self.a;
        ((a3 * t + a2) * t + a1) * t + a0
    }

    pub fn derivative(&self, t: T) -> T {
        let [_, a1, a2, a3] = self.a;
        (lit::<T>(3.0) * a3 * t + lit::<T>(2.0) * a2) * t + a1
    }
}

/// Planar cubic segment over `[0, duration]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicSegment<T> {
    pub x: Cubic<T>,
    pub y: Cubic<T>,
    pub duration: T,
}

impl<T: Real> CubicSegment<T> {
    pub fn position(&self, t: T) -> State2<T> {
        State2::new(self.x.eval(t), self.y.eval(t))
    }

    pub fn velocity(&self, t: T) -> Control2<T> {
        Control2::new(self.x.derivative(t), self.y.derivative(t))
    }
}

/// Fits the Hermite segment through `(x0, u0)` at `t = 0` and `(x2, u2)` at
/// `t = duration`.
pub fn fit_hermite<T: Real>(
    x0: State2<T>,
    u0: Control2<T>,
    x2: State2<T>,
    u2: Control2<T>,
    duration: T,
) -> Result<CubicSegment<T>, SplineError> {
    if !(duration > T::zero()) {
        return Err(SplineError::NonPositiveDuration(
            duration.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(CubicSegment {
        x: Cubic::hermite(x0.x, u0.vx, x2.x, u2.vx, duration),
        y: Cubic::hermite(x0.y, u0.vy, x2.y, u2.vy, duration),
        duration,
    })
}

fn sample_times<T: Real>(duration: T, dt: T) -> Result<Vec<T>, SplineError> {
    if !(dt > T::zero()) || dt > duration * (T::one() + lit(1e-12)) {
        return Err(SplineError::BadSamplePeriod {
            dt: dt.to_f64().unwrap_or(f64::NAN),
            duration: duration.to_f64().unwrap_or(f64::NAN),
        });
    }
    let ratio = duration / dt;
    let n = (ratio + lit::<T>(1e-9) * ratio.max(T::one()))
        .floor()
        .to_usize()
        .unwrap_or(0);
    Ok((0..=n)
        .map(|i| (T::from_usize(i).unwrap() * dt).min(duration))
        .collect())
}

/// Samples `(X_ref, U_ref)` at `t = 0, dt, 2 dt, ... <= duration`.
pub fn sample_ref<T: Real>(
    seg: &CubicSegment<T>,
    dt_track: T,
) -> Result<Vec<(State2<T>, Control2<T>)>, SplineError> {
    Ok(sample_times(seg.duration, dt_track)?
        .into_iter()
        .map(|t| (seg.position(t), seg.velocity(t)))
        .collect())
}

/// Position segment plus a heading profile for the three-state tracker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingSegment<T> {
    pub planar: CubicSegment<T>,
    pub heading: Cubic<T>,
}

/// Speed below which a velocity carries no usable heading.
const HEADING_SPEED_FLOOR: f64 = 1e-3;

fn implied_heading<T: Real>(u: Control2<T>, fallback: T) -> T {
    if u.vx.hypot(u.vy) > lit(HEADING_SPEED_FLOOR) {
        u.vy.atan2(u.vx)
    } else {
        fallback
    }
}

/// Shifts `angle` by whole turns so it lies within pi of `reference`.
pub fn unwrap_near<T: Real>(angle: T, reference: T) -> T {
    reference + wrap_angle(angle - reference)
}

/// Builds the tracker reference: Hermite position segment plus a heading
/// interpolated between the velocity directions at both ends. `psi_hint`
/// (usually the current heading) anchors unwrapping and replaces undefined
/// directions at rest.
pub fn fit_tracking_segment<T: Real>(
    x0: State2<T>,
    u0: Control2<T>,
    x2: State2<T>,
    u2: Control2<T>,
    duration: T,
    psi_hint: T,
) -> Result<TrackingSegment<T>, SplineError> {
    let planar = fit_hermite(x0, u0, x2, u2, duration)?;
    let psi0 = unwrap_near(implied_heading(u0, psi_hint), psi_hint);
    let psi2 = unwrap_near(implied_heading(u2, psi0), psi0);
    let rate = (psi2 - psi0) / duration;
    Ok(TrackingSegment {
        planar,
        heading: Cubic::hermite(psi0, rate, psi2, rate, duration),
    })
}

/// Samples `(X_ref, U_ref)` for the tracker. Headings are left unwrapped so
/// consecutive samples are continuous.
pub fn sample_tracking_ref<T: Real>(
    seg: &TrackingSegment<T>,
    dt_track: T,
) -> Result<Vec<(State3<T>, Control3<T>)>, SplineError> {
    Ok(sample_times(seg.planar.duration, dt_track)?
        .into_iter()
        .map(|t| {
            let p = seg.planar.position(t);
            let v = seg.planar.velocity(t);
            (
                State3 {
                    x: p.x,
                    y: p.y,
                    psi: seg.heading.eval(t),
                },
                Control3::new(v.vx, v.vy, seg.heading.derivative(t)),
            )
        })
        .collect())
}
