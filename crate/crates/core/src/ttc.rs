//! Closed-form time-to-collision cost between two agents.
//!
//! Under a constant-velocity assumption the squared distance between two
//! agents is a quadratic in time, so the closest-approach time and distance
//! have closed forms built from the relative position and velocity. The
//! instantaneous cost squashes both through a Gaussian-shaped kernel,
//! `exp(-t^2 / (2 lambda_t) - d^2 / (2 lambda_d))`, giving a bounded value in
//! (0, 1] that rises sharply as a collision becomes imminent. A trajectory
//! cost averages the instantaneous cost over aligned timesteps, and
//! [`cost_map`] rasterizes the instantaneous cost over a spatial grid for
//! inspection.

use crate::error::{Error, Result};
use crate::geom::{Trajectory, Vec2};

/// Relative kinematic state of agent `i` with respect to agent `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeState {
    /// Position difference x_i - x_j in meters.
    pub dx: f64,
    /// Position difference y_i - y_j in meters.
    pub dy: f64,
    /// Velocity difference vx_i - vx_j in meters/second.
    pub dvx: f64,
    /// Velocity difference vy_i - vy_j in meters/second.
    pub dvy: f64,
}

impl RelativeState {
    pub fn new(dx: f64, dy: f64, dvx: f64, dvy: f64) -> Self {
        Self { dx, dy, dvx, dvy }
    }

    /// Relative state of the agent at (`pos_i`, `vel_i`) with respect to the
    /// agent at (`pos_j`, `vel_j`).
    pub fn between(pos_i: Vec2, vel_i: Vec2, pos_j: Vec2, vel_j: Vec2) -> Self {
        Self {
            dx: pos_i.x - pos_j.x,
            dy: pos_i.y - pos_j.y,
            dvx: vel_i.x - vel_j.x,
            dvy: vel_i.y - vel_j.y,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dvx.is_finite() && self.dvy.is_finite()
    }
}

/// Bandwidths and numerical floor for the time-to-collision cost.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtcParams {
    /// Time bandwidth in seconds^2.
    pub lambda_t: f64,
    /// Distance bandwidth in meters^2.
    pub lambda_d: f64,
    /// Floor applied to the relative speed before dividing, in meters/second.
    pub epsilon: f64,
}

impl Default for TtcParams {
    fn default() -> Self {
        Self { lambda_t: 0.2, lambda_d: 2.0, epsilon: 0.01 }
    }
}

impl TtcParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("lambda_d", self.lambda_d),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!(
                    "ttc parameter {name} must be strictly positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Closest-approach time and squared distance under constant velocities.
///
/// Returns `(t_tilde, d2_tilde)`. When the unclamped closest-approach time is
/// negative (the agents are separating) or undefined (zero relative
/// velocity), the closest approach is now: `t_tilde = 0` and `d2_tilde` is
/// the current squared distance. Otherwise both quantities divide by the
/// relative speed clamped below at `epsilon`.
pub fn closest_approach(rel: RelativeState, epsilon: f64) -> (f64, f64) {
    let dv2 = rel.dvx * rel.dvx + rel.dvy * rel.dvy;
    let s = -(rel.dvx * rel.dx + rel.dvy * rel.dy);
    let t_col = s / dv2;
    // The NaN check catches the 0/0 of a zero relative velocity, which must
    // take the fallback (distance stays at its current value).
    if t_col.is_nan() || t_col < 0.0 {
        return (0.0, rel.dx * rel.dx + rel.dy * rel.dy);
    }
    // max(|dv|, eps)^2 computed without the sqrt round trip.
    let dv_safe2 = dv2.max(epsilon * epsilon);
    let t_tilde = (s / dv_safe2).max(0.0);
    let cross = rel.dvx * rel.dy - rel.dvy * rel.dx;
    let d2_tilde = (cross * cross) / dv_safe2;
    (t_tilde, d2_tilde)
}

/// Instantaneous collision cost in (0, 1].
pub fn instantaneous_ttc_cost(rel: RelativeState, params: &TtcParams) -> Result<f64> {
    params.validate()?;
    if !rel.is_finite() {
        return Err(Error::Domain(format!("non-finite relative state {rel:?}")));
    }
    let (t_tilde, d2_tilde) = closest_approach(rel, params.epsilon);
    Ok((-t_tilde * t_tilde / (2.0 * params.lambda_t) - d2_tilde / (2.0 * params.lambda_d)).exp())
}

/// Mean instantaneous cost over aligned timesteps of two trajectories.
///
/// Velocities are recovered by forward differences of the stored positions.
pub fn trajectory_ttc_cost(
    agent: &Trajectory,
    robot: &Trajectory,
    params: &TtcParams,
) -> Result<f64> {
    if agent.len() != robot.len() {
        return Err(Error::Usage(format!(
            "trajectory lengths differ: agent {} vs robot {}",
            agent.len(),
            robot.len()
        )));
    }
    if (agent.dt() - robot.dt()).abs() > 1e-12 {
        return Err(Error::Usage(format!(
            "trajectory time steps differ: agent {} vs robot {}",
            agent.dt(),
            robot.dt()
        )));
    }
    let agent_vel = agent.velocities();
    let robot_vel = robot.velocities();
    let mut total = 0.0;
    for k in 0..agent.len() {
        let rel = RelativeState::between(
            agent.points()[k],
            agent_vel[k],
            robot.points()[k],
            robot_vel[k],
        );
        total += instantaneous_ttc_cost(rel, params)?;
    }
    Ok(total / agent.len() as f64)
}

/// Rectangular sampling grid with a fixed spacing on both axes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Sample spacing along both axes.
    pub resolution: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("x_min", self.x_min),
            ("x_max", self.x_max),
            ("y_min", self.y_min),
            ("y_max", self.y_max),
            ("resolution", self.resolution),
        ] {
            if !v.is_finite() {
                return Err(Error::Usage(format!("grid {name} must be finite, got {v}")));
            }
        }
        if self.resolution <= 0.0 {
            return Err(Error::Usage(format!(
                "grid resolution must be positive, got {}",
                self.resolution
            )));
        }
        if self.x_max < self.x_min || self.y_max < self.y_min {
            return Err(Error::Usage("grid bounds describe an empty region".to_string()));
        }
        Ok(())
    }

    fn axis(min: f64, max: f64, resolution: f64) -> Vec<f64> {
        // The slack admits ranges that are a whole multiple of the spacing up
        // to rounding, so [0, 10] at 2.5 yields 5 samples, not 4.
        let n = ((max - min) / resolution + 1e-9).floor() as usize + 1;
        (0..n).map(|i| min + i as f64 * resolution).collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        Self::axis(self.x_min, self.x_max, self.resolution)
    }

    pub fn ys(&self) -> Vec<f64> {
        Self::axis(self.y_min, self.y_max, self.resolution)
    }
}

/// Grid of sampled costs, row-major over (y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[iy * xs.len() + ix]` is the cost at `(xs[ix], ys[iy])`.
    pub values: Vec<f64>,
}

impl CostMap {
    /// Cells in emission order: `(x, y, value)` row by row.
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let nx = self.xs.len();
        self.ys.iter().enumerate().flat_map(move |(iy, &y)| {
            self.xs
                .iter()
                .enumerate()
                .map(move |(ix, &x)| (x, y, self.values[iy * nx + ix]))
        })
    }
}

/// Instantaneous cost of a probe agent placed at each grid cell.
///
/// The probe moves with speed `probe_speed` along `probe_heading` (radians,
/// measured from the +x axis); the robot sits at `robot_pos` with velocity
/// `robot_vel`.
pub fn cost_map(
    robot_pos: Vec2,
    robot_vel: Vec2,
    probe_speed: f64,
    probe_heading: f64,
    grid: &GridSpec,
    params: &TtcParams,
) -> Result<CostMap> {
    grid.validate()?;
    params.validate()?;
    let probe_vel = Vec2::new(probe_speed * probe_heading.cos(), probe_speed * probe_heading.sin());
    let xs = grid.xs();
    let ys = grid.ys();
    let mut values = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let rel = RelativeState::between(Vec2::new(x, y), probe_vel, robot_pos, robot_vel);
            values.push(instantaneous_ttc_cost(rel, params)?);
        }
    }
    Ok(CostMap { xs, ys, values })
}
