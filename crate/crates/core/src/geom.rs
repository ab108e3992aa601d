//! Planar geometry shared by the world generator, rasterizer, losses and
//! metrics.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Vec2 { x: a[0], y: a[1] }
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise normal.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(position: Vec2, heading: f64) -> Self {
        Pose { position, heading }
    }

    /// Expresses a world point in this pose's frame.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position).rotate(-self.heading)
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading) + self.position
    }

    pub fn pose_to_local(&self, other: &Pose) -> Pose {
        Pose::new(self.to_local(other.position), wrap_angle(other.heading - self.heading))
    }
}

/// Closest point on segment `ab` to `p`: (distance, parameter in [0,1], point).
pub fn point_segment(p: Vec2, a: Vec2, b: Vec2) -> (f64, f64, Vec2) {
    let ab = b - a;
    let l2 = ab.dot(ab);
    let t = if l2 > 0.0 {
        ((p - a).dot(ab) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = a + ab * t;
    (p.dist(c), t, c)
}

/// Nearest point on a polyline: (distance, segment index, parameter, point).
pub fn nearest_on_polyline(p: Vec2, pts: &[Vec2]) -> Option<(f64, usize, f64, Vec2)> {
    if pts.len() == 1 {
        return Some((p.dist(pts[0]), 0, 0.0, pts[0]));
    }
    pts.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (d, t, c) = point_segment(p, w[0], w[1]);
            (d, i, t, c)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

pub fn polyline_length(pts: &[Vec2]) -> f64 {
    pts.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// `n` points evenly spaced by arc length, endpoints included.
pub fn resample(pts: &[Vec2], n: usize) -> Vec<Vec2> {
    if pts.is_empty() || n == 0 {
        return Vec::new();
    }
    if pts.len() == 1 || n == 1 {
        return vec![pts[0]; n];
    }
    let total = polyline_length(pts);
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut acc = 0.0;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        loop {
            let len = pts[seg].dist(pts[seg + 1]);
            if acc + len >= target || seg + 2 == pts.len() {
                let t = if len > 0.0 { ((target - acc) / len).clamp(0.0, 1.0) } else { 0.0 };
                out.push(pts[seg].lerp(pts[seg + 1], t));
                break;
            }
            acc += len;
            seg += 1;
        }
    }
    out
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Liang-Barsky clip of segment `ab`; returns the parameter interval kept.
    fn clip_segment(&self, a: Vec2, b: Vec2) -> Option<(f64, f64)> {
        let d = b - a;
        let mut t0: f64 = 0.0;
        let mut t1: f64 = 1.0;
        for (p, q) in [
            (-d.x, a.x - self.min.x),
            (d.x, self.max.x - a.x),
            (-d.y, a.y - self.min.y),
            (d.y, self.max.y - a.y),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// Longest contiguous piece of a polyline inside the rectangle, if it
    /// has at least two distinct points.
    pub fn clip_polyline(&self, pts: &[Vec2]) -> Option<Vec<Vec2>> {
        let mut best: Vec<Vec2> = Vec::new();
        let mut cur: Vec<Vec2> = Vec::new();
        let flush = |cur: &mut Vec<Vec2>, best: &mut Vec<Vec2>| {
            if polyline_length(cur) > polyline_length(best) {
                *best = std::mem::take(cur);
            } else {
                cur.clear();
            }
        };
        for w in pts.windows(2) {
            match self.clip_segment(w[0], w[1]) {
                Some((t0, t1)) => {
                    let a = w[0].lerp(w[1], t0);
                    let b = w[0].lerp(w[1], t1);
                    if cur.last().is_none_or(|l| l.dist(a) > 1e-9) {
                        if !cur.is_empty() {
                            flush(&mut cur, &mut best);
                        }
                        cur.push(a);
                    }
                    if cur.last().is_none_or(|l| l.dist(b) > 1e-9) {
                        cur.push(b);
                    }
                    if t1 < 1.0 {
                        flush(&mut cur, &mut best);
                    }
                }
                None => flush(&mut cur, &mut best),
            }
        }
        flush(&mut cur, &mut best);
        (best.len() >= 2).then_some(best)
    }
}

/// Oriented rectangle (vehicle footprint).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        OrientedBox {
            center,
            heading,
            length,
            width,
        }
    }

    pub fn axes(&self) -> [Vec2; 2] {
        let u = Vec2::from_angle(self.heading);
        [u, u.perp()]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, v] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [
            self.center + u * hl + v * hw,
            self.center - u * hl + v * hw,
            self.center - u * hl - v * hw,
            self.center + u * hl - v * hw,
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let [u, v] = self.axes();
        let d = p - self.center;
        d.dot(u).abs() <= self.length / 2.0 && d.dot(v).abs() <= self.width / 2.0
    }

    /// Largest projected gap over the four candidate separating axes.
    /// Positive means separated by at least that much along some axis;
    /// non-positive means the boxes overlap (or touch).
    pub fn separation(&self, other: &OrientedBox) -> f64 {
        let ca = self.corners();
        let cb = other.corners();
        let mut best = f64::NEG_INFINITY;
        for axis in self.axes().into_iter().chain(other.axes()) {
            let (amin, amax) = project(&ca, axis);
            let (bmin, bmax) = project(&cb, axis);
            best = best.max((bmin - amax).max(amin - bmax));
        }
        best
    }

    /// Separating-axis overlap test; touching counts as overlap.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        self.separation(other) <= 0.0
    }
}

fn project(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

/// Menger curvature of three points (0 for degenerate triples).
pub fn menger_curvature(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let ab = a.dist(b);
    let bc = b.dist(c);
    let ca = c.dist(a);
    let denom = ab * bc * ca;
    if denom < 1e-12 {
        return 0.0;
    }
    2.0 * (b - a).cross(c - a).abs() / denom
}
