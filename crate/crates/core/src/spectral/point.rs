use crate::TAU;
#[allow(unused_imports)]
use crate::Float;

/// Reduces an angle into `[0, 2π)`.
#[inline]
pub fn wrap_angle(x: f64) -> f64 {
    let r = x - TAU * (x / TAU).floor();
    // `x` slightly below a multiple of 2π can round up to exactly 2π.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// A point of the torus, both angles kept in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TorusPoint {
    theta1: f64,
    theta2: f64,
}

impl TorusPoint {
    #[inline]
    pub fn new(theta1: f64, theta2: f64) -> Self {
        Self { theta1: wrap_angle(theta1), theta2: wrap_angle(theta2) }
    }

    #[inline]
    pub fn theta1(&self) -> f64 {
        self.theta1
    }

    #[inline]
    pub fn theta2(&self) -> f64 {
        self.theta2
    }

    #[inline]
    pub fn coords(&self) -> [f64; 2] {
        [self.theta1, self.theta2]
    }

    /// `self + v`, wrapped.
    #[inline]
    pub fn translate(&self, v: [f64; 2]) -> Self {
        Self::new(self.theta1 + v[0], self.theta2 + v[1])
    }

    pub fn is_finite(&self) -> bool {
        self.theta1.is_finite() && self.theta2.is_finite()
    }
}

/// Signed shortest representative of `a − b` in `[−π, π)`.
#[inline]
pub(crate) fn angular_gap(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    if d >= core::f64::consts::PI {
        d - TAU
    } else {
        d
    }
}

/// Flat geodesic distance on the torus.
pub fn torus_distance(p: TorusPoint, q: TorusPoint) -> f64 {
    let d1 = angular_gap(p.theta1, q.theta1);
    let d2 = angular_gap(p.theta2, q.theta2);
    (d1 * d1 + d2 * d2).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrapping_lands_in_range() {
        for x in [-1e-17, -TAU, 3.0 * TAU + 0.5, TAU, -7.25, 0.0] {
            let w = wrap_angle(x);
            assert!((0.0..TAU).contains(&w), "{x} -> {w}");
        }
        assert!((wrap_angle(-0.5) - (TAU - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn distance_uses_shortest_image() {
        let p = TorusPoint::new(0.1, 0.0);
        let q = TorusPoint::new(TAU - 0.1, 0.0);
        assert!((torus_distance(p, q) - 0.2).abs() < 1e-12);
    }
}
