//! Closed-form reference paths and motion profiles used by the scripted
//! world.

use crate::geom::{wrap_angle, Pose, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Piece {
    Straight,
    Arc { curvature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    piece: Piece,
    s_start: f64,
    length: f64,
    start: Pose,
}

/// A G1-continuous chain of straight and constant-curvature pieces,
/// parameterised by arc length. Beyond either end it extends straight.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    segments: Vec<Segment>,
    end: Pose,
    length: f64,
}

fn advance(start: &Pose, piece: Piece, ds: f64) -> Pose {
    match piece {
        Piece::Straight => Pose::new(start.position + Vec2::from_angle(start.heading) * ds, start.heading),
        Piece::Arc { curvature } => {
            let th = start.heading + curvature * ds;
            let dx = (th.sin() - start.heading.sin()) / curvature;
            let dy = -(th.cos() - start.heading.cos()) / curvature;
            Pose::new(start.position + Vec2::new(dx, dy), th)
        }
    }
}

pub struct PathBuilder {
    start: Pose,
    pieces: Vec<(Piece, f64)>,
}

impl PathBuilder {
    pub fn straight(mut self, length: f64) -> Self {
        self.pieces.push((Piece::Straight, length));
        self
    }

    /// Arc of signed curvature (left positive).
    pub fn arc(mut self, curvature: f64, length: f64) -> Self {
        if curvature.abs() < 1e-9 {
            return self.straight(length);
        }
        self.pieces.push((Piece::Arc { curvature }, length));
        self
    }

    pub fn build(self) -> Path {
        let mut segments = Vec::with_capacity(self.pieces.len());
        let mut pose = self.start;
        let mut s = 0.0;
        for (piece, length) in self.pieces {
            segments.push(Segment {
                piece,
                s_start: s,
                length,
                start: pose,
            });
            pose = advance(&pose, piece, length);
            s += length;
        }
        Path {
            segments,
            end: pose,
            length: s,
        }
    }
}

impl Path {
    pub fn builder(start: Pose) -> PathBuilder {
        PathBuilder {
            start,
            pieces: Vec::new(),
        }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn pose_at(&self, s: f64) -> Pose {
        if s < 0.0 || self.segments.is_empty() {
            let start = self.segments.first().map_or(self.end, |g| g.start);
            return advance(&start, Piece::Straight, s);
        }
        for g in &self.segments {
            if s <= g.s_start + g.length {
                return advance(&g.start, g.piece, s - g.s_start);
            }
        }
        advance(&self.end, Piece::Straight, s - self.length)
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.segments
            .iter()
            .find(|g| s >= g.s_start && s <= g.s_start + g.length)
            .map_or(0.0, |g| match g.piece {
                Piece::Straight => 0.0,
                Piece::Arc { curvature } => curvature,
            })
    }

    /// Point at arc length `s`, displaced `d` along the left normal.
    pub fn offset_point(&self, s: f64, d: f64) -> Vec2 {
        let p = self.pose_at(s);
        p.position + Vec2::from_angle(p.heading).perp() * d
    }

    /// Samples the offset curve over `[s0, s1]` at roughly `step` spacing.
    pub fn sample_offset(&self, s0: f64, s1: f64, d: f64, step: f64) -> Vec<Vec2> {
        let n = ((s1 - s0) / step).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| self.offset_point(s0 + (s1 - s0) * i as f64 / n as f64, d))
            .collect()
    }

    /// Arc length and signed lateral offset of the closest path point.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        // coarse scan, then golden-section refinement
        let lo = -20.0;
        let hi = self.length + 20.0;
        let n = ((hi - lo) / 0.5).ceil() as usize;
        let dist = |s: f64| self.pose_at(s).position.dist(p);
        let (mut best_s, mut best_d) = (lo, f64::INFINITY);
        for i in 0..=n {
            let s = lo + (hi - lo) * i as f64 / n as f64;
            let d = dist(s);
            if d < best_d {
                best_d = d;
                best_s = s;
            }
        }
        let (mut a, mut b) = (best_s - 0.5, best_s + 0.5);
        let g = 0.618_033_988_749_895;
        for _ in 0..40 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if dist(c) < dist(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let s = 0.5 * (a + b);
        let pose = self.pose_at(s);
        let lat = (p - pose.position).dot(Vec2::from_angle(pose.heading).perp());
        (s, lat)
    }
}

/// Piecewise constant-acceleration speed profile along a path.
///
/// Before `t_start` the entity moves at `v_start`; afterwards each phase
/// applies its acceleration until the phase ends or the speed reaches the
/// phase's target, then holds speed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub t_start: f64,
    pub s_start: f64,
    pub v_start: f64,
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub duration: f64,
    pub accel: f64,
    /// Speed at which acceleration stops (clamps from either side).
    pub target: f64,
}

impl SpeedProfile {
    pub fn constant(s_at_zero: f64, v: f64) -> Self {
        SpeedProfile {
            t_start: 0.0,
            s_start: s_at_zero,
            v_start: v,
            phases: Vec::new(),
        }
    }

    /// (arc length, speed) at time `t`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        if t <= self.t_start {
            return (self.s_start + self.v_start * (t - self.t_start), self.v_start);
        }
        let mut s = self.s_start;
        let mut v = self.v_start;
        let mut remaining = t - self.t_start;
        for ph in &self.phases {
            if remaining <= 0.0 {
                break;
            }
            let dur = ph.duration.min(remaining);
            // time until the target speed is reached
            let t_hit = if ph.accel != 0.0 {
                ((ph.target - v) / ph.accel).max(0.0)
            } else {
                f64::INFINITY
            };
            let ta = dur.min(t_hit);
            s += v * ta + 0.5 * ph.accel * ta * ta;
            v += ph.accel * ta;
            s += v * (dur - ta);
            remaining -= ph.duration;
        }
        if remaining > 0.0 {
            s += v * remaining;
        }
        (s, v)
    }
}

/// Smooth lateral transitions expressed over arc length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LateralProfile {
    /// (start s, length, offset before, offset after)
    pub shifts: Vec<(f64, f64, f64, f64)>,
}

impl LateralProfile {
    pub fn none() -> Self {
        LateralProfile::default()
    }

    pub fn offset(&self, s: f64) -> f64 {
        let mut d = self.shifts.first().map_or(0.0, |sh| sh.2);
        for &(s0, len, from, to) in &self.shifts {
            if s <= s0 {
                break;
            }
            let u = ((s - s0) / len).clamp(0.0, 1.0);
            let blend = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
            d = from + (to - from) * blend;
        }
        d
    }
}

/// Motion of an entity along a path: where it is at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMotion {
    pub profile: SpeedProfile,
    pub lateral: LateralProfile,
    /// +1 travels with the path direction, -1 against it.
    pub direction: f64,
}

impl PathMotion {
    pub fn pose(&self, path: &Path, t: f64) -> (Pose, f64) {
        let (s_rel, v) = self.profile.eval(t);
        let s = if self.direction < 0.0 {
            2.0 * self.profile.s_start - s_rel
        } else {
            s_rel
        };
        let d = self.lateral.offset(s);
        let p = path.offset_point(s, d);
        let eps = 1e-3;
        let ahead = path.offset_point(s + eps, self.lateral.offset(s + eps));
        let behind = path.offset_point(s - eps, self.lateral.offset(s - eps));
        let mut heading = (ahead - behind).angle();
        if self.direction < 0.0 {
            heading = wrap_angle(heading + std::f64::consts::PI);
        }
        let k = path.curvature_at(s);
        let speed = (v * (1.0 - k * d)).abs();
        (Pose::new(p, heading), speed)
    }
}
