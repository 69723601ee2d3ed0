//! Planar geometry primitives: 2-D vectors and timestamped trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D vector in meters (positions) or meters/second (velocities).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the cross product, the signed parallelogram area.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    /// Rotates by `angle` radians counterclockwise.
    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// A uniformly sampled sequence of positions, `dt` seconds apart.
///
/// The struct stores positions only; velocities are derived with forward
/// finite differences where the last step repeats, so a trajectory of `n`
/// points yields `n` velocity samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    dt: f64,
    points: Vec<Vec2>,
}

impl Trajectory {
    pub fn new(dt: f64, points: Vec<Vec2>) -> Result<Self> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::Usage(format!(
                "trajectory dt must be positive and finite, got {dt}"
            )));
        }
        if points.is_empty() {
            return Err(Error::Usage("trajectory must contain at least one point".into()));
        }
        Ok(Trajectory { dt, points })
    }

    /// Straight-line motion: point `k` is `start + vel * (k * dt)`.
    pub fn constant_velocity(start: Vec2, vel: Vec2, dt: f64, n_points: usize) -> Result<Self> {
        let points = (0..n_points)
            .map(|k| start + vel.scale(k as f64 * dt))
            .collect();
        Trajectory::new(dt, points)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty point lists
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Vec2 {
        self.points[i]
    }

    pub fn first_position(&self) -> Vec2 {
        self.points[0]
    }

    pub fn final_position(&self) -> Vec2 {
        *self.points.last().expect("trajectory is never empty")
    }

    /// Forward finite-difference velocities; the last entry repeats the
    /// previous one. A single-point trajectory has zero velocity.
    pub fn velocities(&self) -> Vec<Vec2> {
        let n = self.points.len();
        if n == 1 {
            return vec![Vec2::ZERO];
        }
        let mut vel = Vec::with_capacity(n);
        for i in 0..n - 1 {
            vel.push((self.points[i + 1] - self.points[i]).scale(1.0 / self.dt));
        }
        vel.push(vel[n - 2]);
        vel
    }

    /// A new trajectory containing points `range` with the same `dt`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Trajectory> {
        if range.end > self.points.len() || range.start >= range.end {
            return Err(Error::Usage(format!(
                "trajectory slice {range:?} out of bounds for length {}",
                self.points.len()
            )));
        }
        Trajectory::new(self.dt, self.points[range].to_vec())
    }

    /// Rigid transform: rotate by `angle` around the origin, then translate.
    pub fn transformed(&self, angle: f64, translation: Vec2) -> Trajectory {
        Trajectory {
            dt: self.dt,
            points: self
                .points
                .iter()
                .map(|p| p.rotated(angle) + translation)
                .collect(),
        }
    }
}
