//! Cross-entropy-method planner over robot acceleration sequences.
//!
//! A candidate plan is a sequence of scalar accelerations along the road
//! axis, rolled out through a double integrator. The objective adds a risk
//! term over pedestrian forecasts to a quadratic reference-tracking cost, and
//! comes in two flavors: a conditional-value-at-risk estimate over unbiased
//! forecast samples, or a plain mean over risk-biased samples. Forecasts are
//! drawn once per episode, conditioned on the initial plan, and reused across
//! iterations; each iteration samples Gaussian perturbations around the
//! current mean plan, scores them, and refits mean and spread to the elites.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biaser::BiaserModel;
use crate::cvae::CvaeModel;
use crate::error::{Error, Result};
use crate::geom::{Trajectory, Vec2};
use crate::risk::cvar_mc;
use crate::sim::{rollout_robot, RobotDynamics, RobotKind};
use crate::ttc::{trajectory_ttc_cost, TtcParams};

/// How the risk term aggregates forecast costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Mean cost over forecasts drawn from the risk-biased distribution.
    RiskNeutralBiased,
    /// Monte-Carlo conditional value at risk over unbiased forecasts.
    RiskSensitiveUnbiased,
}

impl PlanMode {
    /// Stable identifier used in report rows and on the command line.
    pub fn label(&self) -> &'static str {
        match self {
            PlanMode::RiskNeutralBiased => "risk_neutral_biased",
            PlanMode::RiskSensitiveUnbiased => "risk_sensitive_unbiased",
        }
    }
}

/// Cross-entropy search schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    /// Candidate plans per iteration.
    pub n_robot_samples: usize,
    /// Best candidates averaged into the next mean.
    pub n_elites: usize,
    pub n_iter: usize,
    /// Initial acceleration perturbation spread, m/s^2.
    pub init_std: f64,
    /// Lower bound on the refitted spread, m/s^2.
    pub std_floor: f64,
    /// Forecast samples per objective evaluation.
    pub n_pred_samples: usize,
    /// Accelerations are clamped to this magnitude, m/s^2.
    pub accel_limit: f64,
    /// Redraw forecasts conditioned on the current mean plan each iteration
    /// instead of freezing them at the initial plan.
    pub recondition_each_iter: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            n_robot_samples: 100,
            n_elites: 30,
            n_iter: 10,
            init_std: 1.0,
            std_floor: 0.05,
            n_pred_samples: 16,
            accel_limit: 4.0,
            recondition_each_iter: false,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_robot_samples == 0 || self.n_elites == 0 || self.n_elites > self.n_robot_samples
        {
            return Err(Error::Domain(format!(
                "need 1 <= n_elites <= n_robot_samples, got {} of {}",
                self.n_elites, self.n_robot_samples
            )));
        }
        if self.n_iter == 0 {
            return Err(Error::Domain("n_iter must be at least 1".into()));
        }
        if self.n_pred_samples == 0 {
            return Err(Error::Domain("n_pred_samples must be at least 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Domain(format!("init_std must be positive, got {}", self.init_std)));
        }
        if !(self.std_floor.is_finite() && self.std_floor >= 0.0) {
            return Err(Error::Domain(format!(
                "std_floor must be non-negative, got {}",
                self.std_floor
            )));
        }
        if !(self.accel_limit.is_finite() && self.accel_limit > 0.0) {
            return Err(Error::Domain(format!(
                "accel_limit must be positive, got {}",
                self.accel_limit
            )));
        }
        Ok(())
    }
}

/// What the planner minimizes: risk aggregation mode, risk level, per-step
/// tracking weights, and the reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanObjectiveSpec {
    pub mode: PlanMode,
    pub sigma: f64,
    /// Diagonal per-step weights on squared position error; same length as
    /// the reference.
    pub q: Vec<f64>,
    pub y_ref: Trajectory,
}

impl PlanObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Domain(format!("risk level must lie in [0, 1], got {}", self.sigma)));
        }
        if self.q.len() != self.y_ref.len() {
            return Err(Error::Usage(format!(
                "{} tracking weights for a {}-point reference",
                self.q.len(),
                self.y_ref.len()
            )));
        }
        if !self.q.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::Domain("tracking weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Constant-velocity reference along the road axis: `steps + 1` points
/// starting at `init_pos`.
pub fn make_reference(init_pos: Vec2, desired_speed: f64, steps: usize, dt: f64) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Usage("reference needs at least one step".into()));
    }
    Trajectory::constant_velocity(init_pos, Vec2::new(desired_speed, 0.0), dt, steps + 1)
}

/// Weighted squared position error summed over aligned steps.
pub fn tracking_cost(y_robot: &Trajectory, y_ref: &Trajectory, q: &[f64]) -> Result<f64> {
    if y_robot.len() != y_ref.len() || q.len() != y_ref.len() {
        return Err(Error::Usage(format!(
            "tracking inputs disagree: plan {}, reference {}, weights {}",
            y_robot.len(),
            y_ref.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for ((p, r), w) in y_robot.points().iter().zip(y_ref.points()).zip(q) {
        total += w * (*p - *r).norm_sq();
    }
    Ok(total)
}

/// Source of pedestrian forecasts for planning.
pub trait Forecaster: Sync {
    /// Draws `k` forecasts given the pedestrian past and the robot's planned
    /// future window.
    fn forecast(
        &self,
        past: &Trajectory,
        robot_future: &Trajectory,
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Trajectory>>;

    /// Hash over every model parameter, to verify planning never mutates the
    /// predictor.
    fn params_hash(&self) -> String;
}

/// Samples from the forecaster prior; ignores the robot plan.
pub struct UnbiasedForecaster<'a> {
    pub cvae: &'a CvaeModel,
}

impl Forecaster for UnbiasedForecaster<'_> {
    fn forecast(
        &self,
        past: &Trajectory,
        _robot_future: &Trajectory,
        k: usize,
        mut rng: &mut dyn RngCore,
    ) -> Result<Vec<Trajectory>> {
        self.cvae.sample_forecasts(past, k, &mut rng)
    }

    fn params_hash(&self) -> String {
        self.cvae.params_hash()
    }
}

/// Samples from the risk-biased latent distribution at a fixed risk level.
pub struct BiasedForecaster<'a> {
    cvae: &'a CvaeModel,
    biaser: &'a BiaserModel,
    sigma: f64,
    /// Conditioning segment for encoders trained on the robot past; `None`
    /// for future-conditioned encoders, which see the planned future instead.
    robot_past: Option<Trajectory>,
}

impl<'a> BiasedForecaster<'a> {
    pub fn new(
        cvae: &'a CvaeModel,
        biaser: &'a BiaserModel,
        sigma: f64,
        robot_past: Option<Trajectory>,
    ) -> Result<Self> {
        biaser.check_cvae(cvae)?;
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::Domain(format!("risk level must lie in [0, 1], got {sigma}")));
        }
        if matches!(biaser.conditioning, crate::biaser::RobotConditioning::Past)
            && robot_past.is_none()
        {
            return Err(Error::Usage(
                "past-conditioned encoder needs the robot past segment".into(),
            ));
        }
        Ok(BiasedForecaster { cvae, biaser, sigma, robot_past })
    }
}

impl Forecaster for BiasedForecaster<'_> {
    fn forecast(
        &self,
        past: &Trajectory,
        robot_future: &Trajectory,
        k: usize,
        mut rng: &mut dyn RngCore,
    ) -> Result<Vec<Trajectory>> {
        let segment = match self.biaser.conditioning {
            crate::biaser::RobotConditioning::Future => robot_future,
            crate::biaser::RobotConditioning::Past => {
                self.robot_past.as_ref().expect("checked at construction")
            }
        };
        self.biaser.sample_biased_forecasts(self.cvae, past, segment, self.sigma, k, &mut rng)
    }

    fn params_hash(&self) -> String {
        format!("{}:{}", self.cvae.params_hash(), self.biaser.params_hash())
    }
}

/// Objective value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveBreakdown {
    pub objective: f64,
    pub risk_term: f64,
    pub tracking_term: f64,
}

/// The planned future window of a rollout: everything after the current
/// point, aligned with forecast horizons.
fn future_window(y_robot: &Trajectory) -> Result<Trajectory> {
    y_robot.slice(1..y_robot.len())
}

/// Scores a rollout against fixed forecasts: risk aggregation per the spec
/// mode plus the tracking cost. An empty forecast list contributes zero risk.
pub fn objective_with_forecasts(
    y_robot: &Trajectory,
    spec: &PlanObjectiveSpec,
    forecasts: &[Trajectory],
    ttc: &TtcParams,
) -> Result<ObjectiveBreakdown> {
    spec.validate()?;
    let tracking_term = tracking_cost(y_robot, &spec.y_ref, &spec.q)?;
    let risk_term = if forecasts.is_empty() {
        0.0
    } else {
        let future = future_window(y_robot)?;
        let costs: Vec<f64> = forecasts
            .iter()
            .map(|f| trajectory_ttc_cost(f, &future, ttc))
            .collect::<Result<_>>()?;
        match spec.mode {
            PlanMode::RiskSensitiveUnbiased => cvar_mc(&costs, spec.sigma)?,
            PlanMode::RiskNeutralBiased => costs.iter().sum::<f64>() / costs.len() as f64,
        }
    };
    Ok(ObjectiveBreakdown { objective: risk_term + tracking_term, risk_term, tracking_term })
}

/// Draws `k` fresh forecasts conditioned on the rollout and scores it.
pub fn plan_objective(
    y_robot: &Trajectory,
    spec: &PlanObjectiveSpec,
    predictor: &dyn Forecaster,
    past: &Trajectory,
    k: usize,
    ttc: &TtcParams,
    rng: &mut dyn RngCore,
) -> Result<ObjectiveBreakdown> {
    if k == 0 {
        return Err(Error::Usage("forecast sample count must be at least 1".into()));
    }
    let future = future_window(y_robot)?;
    let forecasts = predictor.forecast(past, &future, k, rng)?;
    objective_with_forecasts(y_robot, spec, &forecasts, ttc)
}

/// Optimized plan plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Final mean rollout, `steps + 1` points starting at the initial state.
    pub trajectory: Trajectory,
    pub accels: Vec<f64>,
    pub objective: ObjectiveBreakdown,
    /// Mean elite objective per iteration; non-increasing when the search
    /// contracts as intended.
    pub elite_history: Vec<f64>,
}

/// Cross-entropy plan refinement from an initial acceleration sequence.
///
/// Forecasts are drawn once, conditioned on the initial plan's future window,
/// and frozen across iterations unless `recondition_each_iter` is set. Each
/// iteration draws candidate perturbations serially from `rng` (so results
/// are thread-count independent), scores candidates in parallel, and refits
/// the sampling distribution to the elites. Ties in the objective break by
/// candidate index.
#[allow(clippy::too_many_arguments)]
pub fn cem_optimize(
    init_accels: &[f64],
    init_pos: Vec2,
    init_vel: Vec2,
    spec: &PlanObjectiveSpec,
    config: &CemConfig,
    predictor: &dyn Forecaster,
    past: &Trajectory,
    ttc: &TtcParams,
    rng: &mut dyn RngCore,
) -> Result<PlanResult> {
    config.validate()?;
    spec.validate()?;
    let steps = init_accels.len();
    if steps == 0 {
        return Err(Error::Usage("plan needs at least one acceleration step".into()));
    }
    if spec.y_ref.len() != steps + 1 {
        return Err(Error::Usage(format!(
            "reference has {} points for a {steps}-step plan",
            spec.y_ref.len()
        )));
    }
    let dt = spec.y_ref.dt();
    let limit = config.accel_limit;
    let rollout = |accels: &[f64]| -> Result<Trajectory> {
        rollout_robot(
            &RobotDynamics {
                kind: RobotKind::DoubleIntegrator,
                init_pos,
                init_vel,
                accels: accels.to_vec(),
            },
            steps,
            dt,
        )
    };

    let mut mean: Vec<f64> = init_accels.iter().map(|a| a.clamp(-limit, limit)).collect();
    let init_traj = rollout(&mean)?;
    let mut forecasts =
        predictor.forecast(past, &future_window(&init_traj)?, config.n_pred_samples, rng)?;

    let mut std = vec![config.init_std; steps];
    let mut elite_history = Vec::with_capacity(config.n_iter);
    for iter in 0..config.n_iter {
        if config.recondition_each_iter && iter > 0 {
            let current = rollout(&mean)?;
            forecasts =
                predictor.forecast(past, &future_window(&current)?, config.n_pred_samples, rng)?;
        }
        let mut candidates = Vec::with_capacity(config.n_robot_samples);
        for _ in 0..config.n_robot_samples {
            let accels: Vec<f64> = (0..steps)
                .map(|t| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (mean[t] + std[t] * noise).clamp(-limit, limit)
                })
                .collect();
            candidates.push(accels);
        }
        let objectives: Vec<f64> = candidates
            .par_iter()
            .map(|accels| {
                let traj = rollout(accels)?;
                Ok(objective_with_forecasts(&traj, spec, &forecasts, ttc)?.objective)
            })
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| objectives[a].total_cmp(&objectives[b]).then(a.cmp(&b)));
        let elites = &order[..config.n_elites];
        elite_history
            .push(elites.iter().map(|&i| objectives[i]).sum::<f64>() / config.n_elites as f64);
        for t in 0..steps {
            let m =
                elites.iter().map(|&i| candidates[i][t]).sum::<f64>() / config.n_elites as f64;
            let var = elites.iter().map(|&i| (candidates[i][t] - m) * (candidates[i][t] - m)).sum::<f64>()
                / config.n_elites as f64;
            mean[t] = m;
            std[t] = var.sqrt().max(config.std_floor);
        }
    }
    let trajectory = rollout(&mean)?;
    let objective = objective_with_forecasts(&trajectory, spec, &forecasts, ttc)?;
    Ok(PlanResult { trajectory, accels: mean, objective, elite_history })
}
