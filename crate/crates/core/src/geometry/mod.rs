//! Planar geometry shared by every subsystem: SE(2) poses, angle
//! arithmetic, polygons and occupancy grids.

pub(crate) mod grid;
mod polygon;

pub use grid::{cost, ray_cast, Cell, Grid2, RayHit};
pub use polygon::{polygon_iou, Polygon2};

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// A point or free vector on the ground plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn distance(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    /// Rotates the vector counter-clockwise by `angle`.
    pub fn rotate(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Unit vector, or zero for the zero vector.
    pub fn normalized(self) -> Point2 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n)
        } else {
            Point2::ZERO
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-π, π]`. The boundary maps to `+π`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Wrapped difference `a - b` in `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Folds an angle into `[0, π)`, identifying headings that differ by a half turn.
pub fn fold_half_turn(a: f64) -> f64 {
    let r = a.rem_euclid(PI);
    // rem_euclid can round up to exactly PI for tiny negative inputs.
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Difference `a - b` modulo π, wrapped into `(-π/2, π/2]`.
pub fn half_turn_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    if d > PI / 2.0 {
        d - PI
    } else {
        d
    }
}

/// Planar pose; `theta` is always wrapped into `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn from_point(p: Point2, theta: f64) -> Self {
        Self::new(p.x, p.y, theta)
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Heading unit vector.
    pub fn heading(&self) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(c, s)
    }

    /// Group composition `self ⊕ other`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let p = self.transform_from(other.position());
        Pose2::new(p.x, p.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let p = (-self.position()).rotate(-self.theta);
        Pose2::new(p.x, p.y, -self.theta)
    }

    /// `self⁻¹ ⊕ other`: `other` expressed in the frame of `self`.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let p = self.transform_to(other.position());
        Pose2::new(p.x, p.y, other.theta - self.theta)
    }

    /// Maps a world point into this frame: `R(-θ)·(p - t)`.
    pub fn transform_to(&self, p: Point2) -> Point2 {
        (p - self.position()).rotate(-self.theta)
    }

    /// Maps a point given in this frame to the world: `R(θ)·p + t`.
    pub fn transform_from(&self, p: Point2) -> Point2 {
        p.rotate(self.theta) + self.position()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// World point expressed in `frame`.
pub fn transform_to_frame(p: Point2, frame: &Pose2) -> Point2 {
    frame.transform_to(p)
}

/// Point given in `frame` expressed in the world.
pub fn transform_from_frame(p: Point2, frame: &Pose2) -> Point2 {
    frame.transform_from(p)
}

/// Planar body twist.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity2 {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl Velocity2 {
    pub const ZERO: Velocity2 = Velocity2 {
        vx: 0.0,
        vy: 0.0,
        omega: 0.0,
    };

    pub const fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Self { vx, vy, omega }
    }

    pub fn linear(&self) -> Point2 {
        Point2::new(self.vx, self.vy)
    }

    pub fn linear_speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn scale(&self, s: f64) -> Velocity2 {
        Velocity2::new(self.vx * s, self.vy * s, self.omega * s)
    }

    /// Scales the linear part down to at most `v_max` (direction kept) and
    /// saturates `omega` to `±w_max`. Non-finite components become zero.
    pub fn clamped(&self, v_max: f64, w_max: f64) -> Velocity2 {
        let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
        let (vx, vy, w) = (finite(self.vx), finite(self.vy), finite(self.omega));
        let speed = vx.hypot(vy);
        let k = if speed > v_max { v_max / speed } else { 1.0 };
        Velocity2::new(vx * k, vy * k, w.clamp(-w_max, w_max))
    }
}

impl std::ops::Add for Velocity2 {
    type Output = Velocity2;
    fn add(self, o: Velocity2) -> Velocity2 {
        Velocity2::new(self.vx + o.vx, self.vy + o.vy, self.omega + o.omega)
    }
}

/// Exact pose increment for a body twist held constant over `dt`
/// (the SE(2) exponential map).
pub fn integrate_twist(pose: &Pose2, twist: &Velocity2, dt: f64) -> Pose2 {
    let dth = twist.omega * dt;
    let (dx, dy) = if dth.abs() < 1e-9 {
        // second-order series of the exact expression
        let a = 1.0 - dth * dth / 6.0;
        let b = dth / 2.0;
        (
            (a * twist.vx - b * twist.vy) * dt,
            (b * twist.vx + a * twist.vy) * dt,
        )
    } else {
        let s = dth.sin() / dth;
        let c = (1.0 - dth.cos()) / dth;
        (
            (s * twist.vx - c * twist.vy) * dt,
            (c * twist.vx + s * twist.vy) * dt,
        )
    };
    pose.compose(&Pose2::new(dx, dy, dth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn transform_identity_frame() {
        let p = transform_to_frame(Point2::new(1.0, 0.0), &Pose2::IDENTITY);
        assert_eq!(p, Point2::new(1.0, 0.0));
    }

    #[test]
    fn transform_quarter_turn() {
        let f = Pose2::new(1.0, 0.0, FRAC_PI_2);
        let p = transform_to_frame(Point2::new(1.0, 0.0), &f);
        assert!(p.norm() < 1e-15);
        let q = transform_to_frame(Point2::new(1.0, 1.0), &f);
        assert!((q.x - 1.0).abs() < 1e-15 && q.y.abs() < 1e-15);
    }

    #[test]
    fn transform_round_trip() {
        let f = Pose2::new(0.5, 0.2, 0.7);
        let p = Point2::new(2.3, -1.1);
        let back = transform_from_frame(transform_to_frame(p, &f), &f);
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn angle_diff_examples() {
        assert_eq!(angle_diff(0.0, 0.0), 0.0);
        // oracle: argument of the unit complex ratio e^{i a} / e^{i b}
        let (a, b) = (3.0_f64, -3.0_f64);
        let oracle = (a.sin() * b.cos() - a.cos() * b.sin()).atan2(a.cos() * b.cos() + a.sin() * b.sin());
        assert!((angle_diff(a, b) - oracle).abs() < 1e-12);
        assert!((angle_diff(a, b) + 0.2832).abs() < 1e-4);
        assert_eq!(angle_diff(FRAC_PI_2, -FRAC_PI_2), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn fold_half_turn_range() {
        assert!((fold_half_turn(190f64.to_radians()) - 10f64.to_radians()).abs() < 1e-12);
        assert_eq!(fold_half_turn(-1e-300), 0.0);
        assert!((half_turn_diff(0.1 + PI, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn twist_integration_straight() {
        let mut p = Pose2::IDENTITY;
        for _ in 0..40 {
            p = integrate_twist(&p, &Velocity2::new(0.5, 0.0, 0.0), 0.05);
        }
        assert!((p.x - 1.0).abs() < 1e-9 && p.y.abs() < 1e-12);
    }

    #[test]
    fn clamp_keeps_direction() {
        let v = Velocity2::new(0.5, 0.0, 2.0).clamped(0.3, 0.6);
        assert!((v.vx - 0.3).abs() < 1e-15 && v.omega == 0.6);
        let v = Velocity2::new(f64::NAN, 0.1, 0.0).clamped(0.3, 0.6);
        assert_eq!(v.vx, 0.0);
    }

    fn pose() -> impl Strategy<Value = Pose2> {
        (-50.0..50.0f64, -50.0..50.0f64, -10.0..10.0f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn frame_round_trip(f in pose(), x in -100.0..100.0f64, y in -100.0..100.0f64) {
            let p = Point2::new(x, y);
            let q = transform_to_frame(transform_from_frame(p, &f), &f);
            prop_assert!((q - p).norm() < 1e-9);
        }

        #[test]
        fn angle_diff_bounded(a in -100.0..100.0f64, b in -100.0..100.0f64) {
            let d = angle_diff(a, b);
            prop_assert!(d > -PI && d <= PI);
            let s = d + angle_diff(b, a);
            let k = (s / TAU).round();
            prop_assert!((s - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn compose_associative(a in pose(), b in pose(), c in pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.x - r.x).abs() < 1e-9 && (l.y - r.y).abs() < 1e-9);
            prop_assert!(angle_diff(l.theta, r.theta).abs() < 1e-9);
        }

        #[test]
        fn theta_always_wrapped(a in pose(), b in pose()) {
            let c = a.compose(&b);
            prop_assert!(c.theta > -PI && c.theta <= PI);
            let i = a.inverse();
            prop_assert!(i.theta > -PI && i.theta <= PI);
        }
    }
}
