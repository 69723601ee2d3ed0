//! Road-crossing simulator with a bimodal pedestrian.
//!
//! The robot drives along the +x axis at y = 0 while a pedestrian crosses
//! the road from a lateral spawn band. Each pedestrian walks at one of two
//! mode speeds (slow or fast, drawn per scene); the observed past window
//! uses the average of the two mode speeds so that the past alone does not
//! reveal the mode, which keeps the forecasting problem genuinely bimodal.
//! The spawn band is placed so the slow mode reaches the road close to when
//! the robot arrives, making the slow mode the dangerous one.
//!
//! `speed_scale` scales every pedestrian speed and models a test-time
//! distribution shift; everything else (bimodality, geometry, noise) stays
//! fixed under the shift.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Trajectory, Vec2};
use crate::rng::item_rng;

/// Pedestrian speed mode drawn once per scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PedMode {
    Slow,
    Fast,
}

/// How the robot behaves in generated datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotFlavor {
    /// Constant speed `robot_speed` along +x, zero acceleration.
    ConstantVelocity,
    /// Initial speed drawn from a truncated normal, per-step accelerations
    /// drawn from a zero-mean normal.
    RandomizedAccel,
}

/// Scene-generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Seconds per step.
    pub dt: f64,
    /// Observed history points (the last one is the present, t = 0).
    pub past_steps: usize,
    /// Future points to predict (t = dt .. future_steps * dt).
    pub future_steps: usize,
    /// Nominal robot speed in m/s along +x.
    pub robot_speed: f64,
    /// Std of the randomized robot's initial speed.
    pub robot_speed_std: f64,
    /// Std of the randomized robot's per-step acceleration in m/s^2.
    pub robot_accel_std: f64,
    pub robot_flavor: RobotFlavor,
    /// Slow pedestrian mode speed in m/s.
    pub ped_speed_slow: f64,
    /// Fast pedestrian mode speed in m/s.
    pub ped_speed_fast: f64,
    /// Probability of the fast mode.
    pub mode_prob_fast: f64,
    /// Std of the additive per-scene speed noise in m/s.
    pub speed_noise_std: f64,
    pub spawn_x_min: f64,
    pub spawn_x_max: f64,
    pub spawn_y_min: f64,
    pub spawn_y_max: f64,
    /// Central pedestrian heading in radians from +x.
    pub heading_center: f64,
    /// Uniform half-width around the central heading.
    pub heading_halfwidth: f64,
    /// Multiplier on every pedestrian speed; models distribution shift.
    pub speed_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            past_steps: 10,
            future_steps: 50,
            robot_speed: 14.0,
            robot_speed_std: 2.0,
            robot_accel_std: 1.0,
            robot_flavor: RobotFlavor::RandomizedAccel,
            ped_speed_slow: 1.0,
            ped_speed_fast: 2.0,
            mode_prob_fast: 0.5,
            speed_noise_std: 0.1,
            spawn_x_min: 49.0,
            spawn_x_max: 63.0,
            spawn_y_min: 3.5,
            spawn_y_max: 4.5,
            heading_center: -std::f64::consts::FRAC_PI_2,
            heading_halfwidth: 0.25,
            speed_scale: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if self.past_steps < 2 {
            return Err(Error::Domain(format!(
                "past_steps must be at least 2 so velocities are derivable, got {}",
                self.past_steps
            )));
        }
        if self.future_steps < 1 {
            return Err(Error::Domain("future_steps must be at least 1".to_string()));
        }
        for (name, v) in [
            ("robot_speed", self.robot_speed),
            ("robot_speed_std", self.robot_speed_std),
            ("robot_accel_std", self.robot_accel_std),
            ("ped_speed_slow", self.ped_speed_slow),
            ("ped_speed_fast", self.ped_speed_fast),
            ("speed_noise_std", self.speed_noise_std),
            ("heading_halfwidth", self.heading_halfwidth),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mode_prob_fast) {
            return Err(Error::Domain(format!(
                "mode_prob_fast must lie in [0, 1], got {}",
                self.mode_prob_fast
            )));
        }
        if !(self.spawn_x_min.is_finite()
            && self.spawn_x_max.is_finite()
            && self.spawn_y_min.is_finite()
            && self.spawn_y_max.is_finite()
            && self.spawn_x_min <= self.spawn_x_max
            && self.spawn_y_min <= self.spawn_y_max)
        {
            return Err(Error::Domain("spawn region must satisfy min <= max".to_string()));
        }
        if !self.heading_center.is_finite() {
            return Err(Error::Domain("heading_center must be finite".to_string()));
        }
        if !(self.speed_scale.is_finite() && self.speed_scale > 0.0) {
            return Err(Error::Domain(format!(
                "speed_scale must be strictly positive, got {}",
                self.speed_scale
            )));
        }
        Ok(())
    }

    /// Episode horizon covered by the future window, in seconds.
    pub fn horizon(&self) -> f64 {
        self.future_steps as f64 * self.dt
    }

    /// Points in the robot trajectory (past and future windows combined).
    pub fn robot_points(&self) -> usize {
        self.past_steps + self.future_steps
    }

    /// Copy of this config with `speed_scale` multiplied by `scale`.
    pub fn shifted(&self, scale: f64) -> Result<SimConfig> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Domain(format!(
                "distribution-shift scale must be strictly positive, got {scale}"
            )));
        }
        Ok(SimConfig { speed_scale: self.speed_scale * scale, ..*self })
    }

    fn mode_speed(&self, mode: PedMode) -> f64 {
        match mode {
            PedMode::Slow => self.ped_speed_slow,
            PedMode::Fast => self.ped_speed_fast,
        }
    }
}

/// Robot motion model for rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RobotKind {
    ConstantVelocity,
    DoubleIntegrator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotDynamics {
    pub kind: RobotKind,
    pub init_pos: Vec2,
    pub init_vel: Vec2,
    /// Longitudinal (+x) acceleration per step; ignored by constant velocity.
    pub accels: Vec<f64>,
}

/// Exact Euler rollout: p[k+1] = p[k] + v[k] dt, vx[k+1] = vx[k] + a[k] dt.
///
/// Returns `steps + 1` points including the initial state.
pub fn rollout_robot(dynamics: &RobotDynamics, steps: usize, dt: f64) -> Result<Trajectory> {
    let use_accel = matches!(dynamics.kind, RobotKind::DoubleIntegrator);
    if use_accel && dynamics.accels.len() < steps {
        return Err(Error::Usage(format!(
            "double integrator needs {} accelerations, got {}",
            steps,
            dynamics.accels.len()
        )));
    }
    let mut points = Vec::with_capacity(steps + 1);
    let mut pos = dynamics.init_pos;
    let mut vel = dynamics.init_vel;
    points.push(pos);
    for k in 0..steps {
        pos = pos + vel.scale(dt);
        if use_accel {
            vel.x += dynamics.accels[k] * dt;
        }
        points.push(pos);
    }
    Trajectory::new(dt, points)
}

/// One generated road-crossing scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Pedestrian history; the last point is the position at t = 0.
    pub ped_past: Trajectory,
    /// Pedestrian ground-truth future, t = dt .. future_steps * dt.
    pub ped_future: Trajectory,
    /// Robot trajectory over the combined past and future window.
    pub robot: Trajectory,
    pub mode: PedMode,
}

impl Scene {
    /// Robot points aligned with the pedestrian past window.
    pub fn robot_past(&self) -> Trajectory {
        self.robot
            .slice(0..self.ped_past.len())
            .expect("scene window lengths validated at construction")
    }

    /// Robot points aligned with the pedestrian future window.
    pub fn robot_future(&self) -> Trajectory {
        self.robot
            .slice(self.ped_past.len()..self.robot.len())
            .expect("scene window lengths validated at construction")
    }

    fn validate_against(&self, config: &SimConfig) -> Result<()> {
        let ok = self.ped_past.len() == config.past_steps
            && self.ped_future.len() == config.future_steps
            && self.robot.len() == config.robot_points()
            && (self.ped_past.dt() - config.dt).abs() < 1e-12
            && (self.ped_future.dt() - config.dt).abs() < 1e-12
            && (self.robot.dt() - config.dt).abs() < 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Format("scene does not match the dataset config".to_string()))
        }
    }

    /// Straight-line distance covered by the pedestrian over the future.
    pub fn travel_distance(&self) -> f64 {
        (self.ped_future.final_position() - self.ped_past.final_position()).norm()
    }
}

/// Draw one scene.
///
/// Draw order is fixed and part of the format: mode, spawn x, spawn y,
/// heading, past speed noise, future speed noise, then robot initial speed
/// and accelerations (randomized flavor only). Reordering would silently
/// change every seeded dataset.
pub fn sample_scene(config: &SimConfig, rng: &mut impl Rng) -> Scene {
    let mode = if rng.random_bool(config.mode_prob_fast) { PedMode::Fast } else { PedMode::Slow };
    let px = rng.random_range(config.spawn_x_min..=config.spawn_x_max);
    let py = rng.random_range(config.spawn_y_min..=config.spawn_y_max);
    let heading = config.heading_center
        + rng.random_range(-config.heading_halfwidth..=config.heading_halfwidth);
    let speed_noise =
        Normal::new(0.0, config.speed_noise_std).expect("validated noise std");
    let past_noise = speed_noise.sample(rng);
    let future_noise = speed_noise.sample(rng);

    // The past window moves at the average of the mode speeds so history does
    // not leak the mode; the future moves at the drawn mode's speed.
    let base_past = 0.5 * (config.ped_speed_slow + config.ped_speed_fast);
    let past_speed = (base_past * config.speed_scale + past_noise).max(0.0);
    let future_speed = (config.mode_speed(mode) * config.speed_scale + future_noise).max(0.0);

    let spawn = Vec2::new(px, py);
    let dir = Vec2::new(heading.cos(), heading.sin());
    let past_points: Vec<Vec2> = (0..config.past_steps)
        .map(|k| {
            let t = (k as f64 - (config.past_steps - 1) as f64) * config.dt;
            spawn + dir.scale(past_speed * t)
        })
        .collect();
    let future_points: Vec<Vec2> = (1..=config.future_steps)
        .map(|k| spawn + dir.scale(future_speed * k as f64 * config.dt))
        .collect();

    let origin_offset = (config.past_steps - 1) as f64 * config.dt;
    let dynamics = match config.robot_flavor {
        RobotFlavor::ConstantVelocity => RobotDynamics {
            kind: RobotKind::ConstantVelocity,
            init_pos: Vec2::new(-config.robot_speed * origin_offset, 0.0),
            init_vel: Vec2::new(config.robot_speed, 0.0),
            accels: Vec::new(),
        },
        RobotFlavor::RandomizedAccel => {
            let speed_dist = Normal::new(config.robot_speed, config.robot_speed_std)
                .expect("validated robot speed std");
            // Rejection-truncate at zero; keeps the distribution normal above 0.
            let v0 = loop {
                let v = speed_dist.sample(rng);
                if v >= 0.0 {
                    break v;
                }
            };
            let accel_dist = Normal::new(0.0, config.robot_accel_std)
                .expect("validated robot accel std");
            let accels: Vec<f64> =
                (0..config.robot_points() - 1).map(|_| accel_dist.sample(rng)).collect();
            RobotDynamics {
                kind: RobotKind::DoubleIntegrator,
                init_pos: Vec2::new(-v0 * origin_offset, 0.0),
                init_vel: Vec2::new(v0, 0.0),
                accels,
            }
        }
    };
    let robot = rollout_robot(&dynamics, config.robot_points() - 1, config.dt)
        .expect("accel sequence sized to the rollout");

    Scene {
        ped_past: Trajectory::new(config.dt, past_points).expect("past_steps >= 2"),
        ped_future: Trajectory::new(config.dt, future_points).expect("future_steps >= 1"),
        robot,
        mode,
    }
}

/// A generated set of scenes together with the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: SimConfig,
    pub scenes: Vec<Scene>,
}

/// Generate `n` scenes deterministically from `seed`.
///
/// Each scene uses its own RNG stream keyed by (seed, index), so the result
/// is identical for any thread count.
pub fn generate_dataset(n: usize, config: &SimConfig, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be at least 1".to_string()));
    }
    config.validate()?;
    let scenes: Vec<Scene> = (0..n)
        .into_par_iter()
        .map(|i| sample_scene(config, &mut item_rng(seed, i as u64, 0)))
        .collect();
    Ok(Dataset { config: *config, scenes })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    n_scenes: usize,
    config: SimConfig,
}

const DATASET_FORMAT: &str = "riskcast-dataset";
const DATASET_VERSION: u32 = 1;
const MAX_RECORD_BYTES: u32 = 1 << 26;

/// Write a dataset: one JSON header line, then a length-prefixed JSON record
/// per scene.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        n_scenes: dataset.scenes.len(),
        config: dataset.config,
    };
    let mut line = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    line.push(b'\n');
    w.write_all(&line)?;
    for scene in &dataset.scenes {
        let body = serde_json::to_vec(scene).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(body.len() as u32).to_le_bytes())?;
        w.write_all(&body)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`], validating every record
/// against the header config.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("dataset header line is unterminated".to_string()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
        if header_line.len() > MAX_RECORD_BYTES as usize {
            return Err(Error::Format("dataset header line is implausibly long".to_string()));
        }
    }
    let header: DatasetHeader = serde_json::from_slice(&header_line)
        .map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!("not a dataset file: format {:?}", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (expected {DATASET_VERSION})",
            header.version
        )));
    }
    header.config.validate()?;
    let mut scenes = Vec::with_capacity(header.n_scenes);
    for i in 0..header.n_scenes {
        let mut len_bytes = [0u8; 4];
        r.read_exact(&mut len_bytes)
            .map_err(|_| Error::Format(format!("dataset truncated at record {i}")))?;
        let len = u32::from_le_bytes(len_bytes);
        if len > MAX_RECORD_BYTES {
            return Err(Error::Format(format!("record {i} length {len} is implausible")));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)
            .map_err(|_| Error::Format(format!("dataset truncated inside record {i}")))?;
        let scene: Scene = serde_json::from_slice(&body)
            .map_err(|e| Error::Format(format!("bad record {i}: {e}")))?;
        scene.validate_against(&header.config)?;
        scenes.push(scene);
    }
    if r.read(&mut byte)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".to_string()));
    }
    Ok(Dataset { config: header.config, scenes })
}
