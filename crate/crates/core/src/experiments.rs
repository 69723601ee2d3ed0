//! Experiment suites over trained forecasting models.
//!
//! Three suites: a forecast-quality table (displacement errors and risk
//! calibration per risk level), risk-estimation error curves comparing the
//! biased-mean estimator against Monte-Carlo tail estimation on unbiased
//! samples, and closed-loop planning comparisons between the two
//! predictor/planner pairings, optionally under a pedestrian speed shift.
//! Every suite is deterministic in (inputs, seed) for any thread count:
//! work is keyed by scene or episode index, and aggregation happens in
//! index order. Reports are emitted as CSV files with pinned headers plus a
//! JSON manifest carrying the config hash and seed, never timestamps.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::biaser::{BiaserModel, SIGMA_GRID};
use crate::cvae::{flatten_relative, CvaeModel};
use crate::error::{Error, Result};
use crate::geom::Trajectory;
use crate::metrics::{fde, mean_stats, min_fde, pairwise_sum, quantile};
use crate::planner::{
    cem_optimize, make_reference, tracking_cost, BiasedForecaster, CemConfig, Forecaster,
    PlanMode, PlanObjectiveSpec, UnbiasedForecaster,
};
use crate::risk::cvar_mc;
use crate::rng::{item_rng, stream_rng};
use crate::sim::{generate_dataset, Scene, SimConfig};
use crate::ttc::{trajectory_ttc_cost, TtcParams};

fn check_sigmas(sigmas: &[f64], what: &str) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::Usage(format!("{what} needs at least one risk level")));
    }
    for s in sigmas {
        if !(0.0..=1.0).contains(s) {
            return Err(Error::Domain(format!("risk level must lie in [0, 1], got {s}")));
        }
    }
    Ok(())
}

/// Sample counts for the forecast evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastEvalConfig {
    /// Unbiased samples behind the reference risk value.
    pub ref_samples: usize,
    /// Samples behind the minimum displacement error column.
    pub fde_samples: usize,
    /// Biased samples behind the risk error columns.
    pub risk_samples: usize,
    pub sigmas: Vec<f64>,
}

impl Default for ForecastEvalConfig {
    fn default() -> Self {
        ForecastEvalConfig {
            ref_samples: 4096,
            fde_samples: 16,
            risk_samples: 4,
            sigmas: SIGMA_GRID.to_vec(),
        }
    }
}

impl ForecastEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.risk_samples == 0 || self.fde_samples == 0 {
            return Err(Error::Domain("sample counts must be at least 1".into()));
        }
        if self.fde_samples > self.ref_samples {
            return Err(Error::Domain(format!(
                "fde_samples {} exceeds ref_samples {}",
                self.fde_samples, self.ref_samples
            )));
        }
        if self.risk_samples > self.fde_samples {
            return Err(Error::Domain(format!(
                "risk_samples {} exceeds fde_samples {}",
                self.risk_samples, self.fde_samples
            )));
        }
        check_sigmas(&self.sigmas, "forecast evaluation")
    }
}

/// One row of the forecast evaluation table. The numeric suffixes in the
/// field names record the default sample counts behind each column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastEvalRow {
    /// Risk level of the biased predictor; `None` on the unbiased row.
    pub sigma: Option<f64>,
    pub minfde16: f64,
    pub fde1: f64,
    /// Mean signed risk error: biased-mean estimate minus the reference
    /// risk; `None` on the unbiased row.
    pub risk_err4: Option<f64>,
    pub risk_abs_err4: Option<f64>,
    pub se_minfde16: f64,
    pub se_fde1: f64,
    pub se_risk_err4: Option<f64>,
    pub se_risk_abs_err4: Option<f64>,
}

struct SceneForecastEval {
    unb_minfde: f64,
    unb_fde1: f64,
    per_sigma: Vec<SigmaEval>,
}

struct SigmaEval {
    minfde: f64,
    fde1: f64,
    risk_err: f64,
}

/// Forecast evaluation table: one unbiased row, then one row per risk level.
///
/// Per scene, the reference risk comes from one pool of `ref_samples`
/// unbiased forecasts, reused for every risk level. Displacement metrics
/// share one latent noise matrix across the unbiased row and every risk
/// level, so sigma-to-sigma and biased-vs-unbiased gaps reflect the
/// latent distribution shift rather than noise redraws.
pub fn run_forecast_eval(
    cvae: &CvaeModel,
    biaser: &BiaserModel,
    scenes: &[Scene],
    config: &ForecastEvalConfig,
    ttc: &TtcParams,
    seed: u64,
) -> Result<Vec<ForecastEvalRow>> {
    config.validate()?;
    biaser.check_cvae(cvae)?;
    if scenes.is_empty() {
        return Err(Error::Usage("forecast evaluation needs at least one scene".into()));
    }
    let latent = cvae.arch.latent_dim;
    let evals: Vec<SceneForecastEval> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| -> Result<SceneForecastEval> {
            let gt = &scene.ped_future;
            let robot_future = scene.robot_future();
            let pool =
                cvae.sample_forecasts(&scene.ped_past, config.ref_samples, &mut item_rng(seed, i as u64, 0))?;
            let pool_costs: Vec<f64> = pool
                .iter()
                .map(|f| trajectory_ttc_cost(f, &robot_future, ttc))
                .collect::<Result<_>>()?;

            let anchor = scene.ped_past.final_position();
            let x = flatten_relative(&scene.ped_past, anchor);
            let cond = biaser.conditioning_input(&biaser.conditioning_segment(scene), anchor)?;
            let mut noise_rng = item_rng(seed, i as u64, 1);
            let noise: Vec<Vec<f64>> = (0..config.fde_samples)
                .map(|_| (0..latent).map(|_| noise_rng.sample(rand_distr::StandardNormal)).collect())
                .collect();

            let prior = cvae.encode_prior(&x)?;
            let unb_forecasts: Vec<Trajectory> = noise
                .iter()
                .map(|eps| cvae.decode_forecast(&scene.ped_past, &prior.reparameterize(eps)?))
                .collect::<Result<_>>()?;
            let unb_minfde = min_fde(&unb_forecasts, gt)?;
            let unb_fde1 = fde(&unb_forecasts[0], gt)?;

            let mut per_sigma = Vec::with_capacity(config.sigmas.len());
            for &sigma in &config.sigmas {
                let g = biaser.encode_biased(&x, sigma, &cond)?;
                let forecasts: Vec<Trajectory> = noise
                    .iter()
                    .map(|eps| cvae.decode_forecast(&scene.ped_past, &g.reparameterize(eps)?))
                    .collect::<Result<_>>()?;
                let biased_costs: Vec<f64> = forecasts[..config.risk_samples]
                    .iter()
                    .map(|f| trajectory_ttc_cost(f, &robot_future, ttc))
                    .collect::<Result<_>>()?;
                let estimate =
                    pairwise_sum(&biased_costs) / config.risk_samples as f64;
                let target = cvar_mc(&pool_costs, sigma)?;
                per_sigma.push(SigmaEval {
                    minfde: min_fde(&forecasts, gt)?,
                    fde1: fde(&forecasts[0], gt)?,
                    risk_err: estimate - target,
                });
            }
            Ok(SceneForecastEval { unb_minfde, unb_fde1, per_sigma })
        })
        .collect::<Result<_>>()?;

    let column = |f: &dyn Fn(&SceneForecastEval) -> f64| -> Vec<f64> {
        evals.iter().map(f).collect()
    };
    let unb_minfde = mean_stats(&column(&|e| e.unb_minfde))?;
    let unb_fde1 = mean_stats(&column(&|e| e.unb_fde1))?;
    let mut rows = vec![ForecastEvalRow {
        sigma: None,
        minfde16: unb_minfde.mean,
        fde1: unb_fde1.mean,
        risk_err4: None,
        risk_abs_err4: None,
        se_minfde16: unb_minfde.se,
        se_fde1: unb_fde1.se,
        se_risk_err4: None,
        se_risk_abs_err4: None,
    }];
    for (s, &sigma) in config.sigmas.iter().enumerate() {
        let minfde = mean_stats(&column(&|e| e.per_sigma[s].minfde))?;
        let fde1 = mean_stats(&column(&|e| e.per_sigma[s].fde1))?;
        let err = mean_stats(&column(&|e| e.per_sigma[s].risk_err))?;
        let abs_err = mean_stats(&column(&|e| e.per_sigma[s].risk_err.abs()))?;
        rows.push(ForecastEvalRow {
            sigma: Some(sigma),
            minfde16: minfde.mean,
            fde1: fde1.mean,
            risk_err4: Some(err.mean),
            risk_abs_err4: Some(abs_err.mean),
            se_minfde16: minfde.se,
            se_fde1: fde1.se,
            se_risk_err4: Some(err.se),
            se_risk_abs_err4: Some(abs_err.se),
        });
    }
    Ok(rows)
}

/// Which estimator a risk-curve point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMethod {
    /// Monte-Carlo tail estimate over K unbiased forecast costs.
    UnbiasedCvar,
    /// Plain mean over K biased forecast costs.
    BiasedMean,
}

impl RiskMethod {
    pub fn label(&self) -> &'static str {
        match self {
            RiskMethod::UnbiasedCvar => "unbiased_cvar",
            RiskMethod::BiasedMean => "biased_mean",
        }
    }
}

/// One point of the risk-estimation error curves: the distribution of
/// (estimate - reference) over scenes for a method at sample count `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskCurvePoint {
    pub method: RiskMethod,
    pub sigma: f64,
    pub k: usize,
    pub err_mean: f64,
    pub err_se: f64,
    pub err_abs_mean: f64,
    pub err_q05: f64,
    pub err_q95: f64,
    pub n_scenes: usize,
}

/// Risk-error distribution over scenes for both estimators at each sample
/// count in `ks`, against a `ref_samples`-sample reference.
///
/// Sample sets are nested across `ks` (the K-sample estimate uses the first
/// K of one drawn batch), so curves vary smoothly in K.
#[allow(clippy::too_many_arguments)]
pub fn risk_error_stats(
    cvae: &CvaeModel,
    biaser: &BiaserModel,
    scenes: &[Scene],
    sigma: f64,
    ks: &[usize],
    ref_samples: usize,
    ttc: &TtcParams,
    seed: u64,
) -> Result<Vec<RiskCurvePoint>> {
    biaser.check_cvae(cvae)?;
    check_sigmas(&[sigma], "risk curves")?;
    if scenes.is_empty() {
        return Err(Error::Usage("risk curves need at least one scene".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Usage("sample counts must be a non-empty list of positives".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    if max_k > ref_samples {
        return Err(Error::Domain(format!(
            "largest sample count {max_k} exceeds ref_samples {ref_samples}"
        )));
    }

    // Per scene: signed errors, baseline method then biased method, per k.
    let errors: Vec<(Vec<f64>, Vec<f64>)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| -> Result<(Vec<f64>, Vec<f64>)> {
            let robot_future = scene.robot_future();
            let cost_of = |fs: &[Trajectory]| -> Result<Vec<f64>> {
                fs.iter().map(|f| trajectory_ttc_cost(f, &robot_future, ttc)).collect()
            };
            let pool = cost_of(&cvae.sample_forecasts(
                &scene.ped_past,
                ref_samples,
                &mut item_rng(seed, i as u64, 0),
            )?)?;
            let target = cvar_mc(&pool, sigma)?;
            let unbiased = cost_of(&cvae.sample_forecasts(
                &scene.ped_past,
                max_k,
                &mut item_rng(seed, i as u64, 1),
            )?)?;
            let segment = biaser.conditioning_segment(scene);
            let biased = cost_of(&biaser.sample_biased_forecasts(
                cvae,
                &scene.ped_past,
                &segment,
                sigma,
                max_k,
                &mut item_rng(seed, i as u64, 2),
            )?)?;
            let mut base_errs = Vec::with_capacity(ks.len());
            let mut bias_errs = Vec::with_capacity(ks.len());
            for &k in ks {
                base_errs.push(cvar_mc(&unbiased[..k], sigma)? - target);
                bias_errs.push(pairwise_sum(&biased[..k]) / k as f64 - target);
            }
            Ok((base_errs, bias_errs))
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(2 * ks.len());
    for (method, pick) in [
        (RiskMethod::UnbiasedCvar, 0usize),
        (RiskMethod::BiasedMean, 1usize),
    ] {
        for (ki, &k) in ks.iter().enumerate() {
            let errs: Vec<f64> = errors
                .iter()
                .map(|(base, bias)| if pick == 0 { base[ki] } else { bias[ki] })
                .collect();
            let stats = mean_stats(&errs)?;
            let abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
            points.push(RiskCurvePoint {
                method,
                sigma,
                k,
                err_mean: stats.mean,
                err_se: stats.se,
                err_abs_mean: pairwise_sum(&abs) / abs.len() as f64,
                err_q05: quantile(&errs, 0.05)?,
                err_q95: quantile(&errs, 0.95)?,
                n_scenes: errs.len(),
            });
        }
    }
    Ok(points)
}

/// Risk levels and sample counts for the risk-error curve suite.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskCurveConfig {
    pub sigmas: Vec<f64>,
    pub ks: Vec<usize>,
    pub ref_samples: usize,
}

impl Default for RiskCurveConfig {
    fn default() -> Self {
        RiskCurveConfig {
            sigmas: vec![0.8, 0.95, 1.0],
            ks: vec![1, 2, 4, 8, 16],
            ref_samples: 4096,
        }
    }
}

impl RiskCurveConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigmas(&self.sigmas, "risk curves")?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Usage("sample counts must be a non-empty list of positives".into()));
        }
        let max_k = *self.ks.iter().max().expect("non-empty");
        if max_k > self.ref_samples {
            return Err(Error::Domain(format!(
                "largest sample count {max_k} exceeds ref_samples {}",
                self.ref_samples
            )));
        }
        Ok(())
    }
}

/// Runs `risk_error_stats` for every configured risk level.
pub fn run_risk_curves(
    cvae: &CvaeModel,
    biaser: &BiaserModel,
    scenes: &[Scene],
    config: &RiskCurveConfig,
    ttc: &TtcParams,
    seed: u64,
) -> Result<Vec<RiskCurvePoint>> {
    check_sigmas(&config.sigmas, "risk curves")?;
    let mut points = Vec::new();
    for &sigma in &config.sigmas {
        points.extend(risk_error_stats(
            cvae,
            biaser,
            scenes,
            sigma,
            &config.ks,
            config.ref_samples,
            ttc,
            seed,
        )?);
    }
    Ok(points)
}

/// Episode grid for the closed-loop planning comparison.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningConfig {
    pub n_episodes: usize,
    /// Risk levels for both predictor/planner pairings.
    pub sigmas: Vec<f64>,
    /// Forecast sample counts per objective evaluation.
    pub ks: Vec<usize>,
    /// Uniform per-step weight on squared reference deviation.
    pub tracking_weight: f64,
    /// Also run the unbiased predictor with the plain-mean objective (the
    /// risk-unaware baseline) at the largest sample count.
    pub include_risk_neutral: bool,
    /// Pedestrian speed multiplier applied to episode generation only;
    /// models a test-time distribution shift.
    pub speed_scale: f64,
    pub cem: CemConfig,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        PlanningConfig {
            n_episodes: 100,
            sigmas: vec![0.8, 0.95],
            ks: vec![1, 2, 4, 16, 64],
            tracking_weight: 0.05,
            include_risk_neutral: true,
            speed_scale: 1.0,
            cem: CemConfig::default(),
        }
    }
}

impl PlanningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 {
            return Err(Error::Domain("n_episodes must be at least 1".into()));
        }
        if !(self.tracking_weight.is_finite() && self.tracking_weight >= 0.0) {
            return Err(Error::Domain(format!(
                "tracking_weight must be non-negative, got {}",
                self.tracking_weight
            )));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Usage("sample counts must be a non-empty list of positives".into()));
        }
        if self.sigmas.is_empty() && !self.include_risk_neutral {
            return Err(Error::Usage("planning grid is empty".into()));
        }
        if !self.sigmas.is_empty() {
            check_sigmas(&self.sigmas, "planning")?;
        }
        self.cem.validate()
    }
}

/// Aggregated closed-loop outcomes for one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanningRow {
    pub mode: PlanMode,
    pub sigma: f64,
    pub k: usize,
    /// Mean TTC cost of the executed plan against the realized pedestrian
    /// future.
    pub ttc_mean: f64,
    /// 95% confidence half-width of `ttc_mean`.
    pub ttc_ci: f64,
    pub track_mean: f64,
    pub track_ci: f64,
    pub n_episodes: usize,
}

/// Planning comparison results over the whole grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanningReport {
    pub rows: Vec<PlanningRow>,
    /// Pedestrian speed multiplier the episodes were generated with.
    pub speed_scale: f64,
}

#[derive(Clone, Copy)]
struct PlanCell {
    mode: PlanMode,
    sigma: f64,
    k: usize,
}

/// Closed-loop planning experiment.
///
/// Episodes are shared across grid cells (common random scenes) so cell
/// comparisons are paired. Each episode starts the robot from the scripted
/// robot's present state, plans accelerations over the forecast horizon
/// toward a constant-speed reference, executes the planned trajectory
/// open-loop, and scores the TTC cost against the scene's realized
/// pedestrian future plus the tracking cost.
pub fn run_planning_experiment(
    cvae: &CvaeModel,
    biaser: &BiaserModel,
    sim: &SimConfig,
    config: &PlanningConfig,
    ttc: &TtcParams,
    seed: u64,
) -> Result<PlanningReport> {
    config.validate()?;
    biaser.check_cvae(cvae)?;
    let episode_sim = sim.shifted(config.speed_scale)?;
    let mut seeder = stream_rng(seed, 0);
    let data_seed: u64 = seeder.random();
    let plan_seed: u64 = seeder.random();
    let dataset = generate_dataset(config.n_episodes, &episode_sim, data_seed)?;

    let mut cells = Vec::new();
    if config.include_risk_neutral {
        let k = *config.ks.iter().max().expect("validated non-empty");
        cells.push(PlanCell { mode: PlanMode::RiskSensitiveUnbiased, sigma: 0.0, k });
    }
    for mode in [PlanMode::RiskSensitiveUnbiased, PlanMode::RiskNeutralBiased] {
        for &sigma in &config.sigmas {
            for &k in &config.ks {
                cells.push(PlanCell { mode, sigma, k });
            }
        }
    }

    let outcomes: Vec<(f64, f64)> = (0..cells.len() * config.n_episodes)
        .into_par_iter()
        .map(|job| -> Result<(f64, f64)> {
            let cell = &cells[job / config.n_episodes];
            let episode = job % config.n_episodes;
            let scene = &dataset.scenes[episode];
            let mut rng = item_rng(plan_seed, job as u64, 0);

            let robot_past = scene.robot_past();
            let init_pos = robot_past.final_position();
            let init_vel = *robot_past.velocities().last().expect("non-empty trajectory");
            let steps = scene.ped_future.len();
            let spec = PlanObjectiveSpec {
                mode: cell.mode,
                sigma: cell.sigma,
                q: vec![config.tracking_weight; steps + 1],
                y_ref: make_reference(init_pos, sim.robot_speed, steps, sim.dt)?,
            };
            let cem = CemConfig { n_pred_samples: cell.k, ..config.cem };
            let unbiased = UnbiasedForecaster { cvae };
            let biased;
            let predictor: &dyn Forecaster = match cell.mode {
                PlanMode::RiskSensitiveUnbiased => &unbiased,
                PlanMode::RiskNeutralBiased => {
                    biased =
                        BiasedForecaster::new(cvae, biaser, cell.sigma, Some(robot_past.clone()))?;
                    &biased
                }
            };
            let result = cem_optimize(
                &vec![0.0; steps],
                init_pos,
                init_vel,
                &spec,
                &cem,
                predictor,
                &scene.ped_past,
                ttc,
                &mut rng,
            )?;
            let planned_future = result.trajectory.slice(1..steps + 1)?;
            let gt_cost = trajectory_ttc_cost(&scene.ped_future, &planned_future, ttc)?;
            let track = tracking_cost(&result.trajectory, &spec.y_ref, &spec.q)?;
            Ok((gt_cost, track))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cells.len());
    for (c, cell) in cells.iter().enumerate() {
        let slice = &outcomes[c * config.n_episodes..(c + 1) * config.n_episodes];
        let ttc_stats = mean_stats(&slice.iter().map(|o| o.0).collect::<Vec<_>>())?;
        let track_stats = mean_stats(&slice.iter().map(|o| o.1).collect::<Vec<_>>())?;
        rows.push(PlanningRow {
            mode: cell.mode,
            sigma: cell.sigma,
            k: cell.k,
            ttc_mean: ttc_stats.mean,
            ttc_ci: ttc_stats.ci95,
            track_mean: track_stats.mean,
            track_ci: track_stats.ci95,
            n_episodes: config.n_episodes,
        });
    }
    Ok(PlanningReport { rows, speed_scale: config.speed_scale })
}

/// Everything a run produced; any section may be empty except all at once.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Report {
    pub forecast: Vec<ForecastEvalRow>,
    pub risk_curves: Vec<RiskCurvePoint>,
    pub planning: Option<PlanningReport>,
    pub planning_shifted: Option<PlanningReport>,
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.forecast.is_empty()
            && self.risk_curves.is_empty()
            && self.planning.is_none()
            && self.planning_shifted.is_none()
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    seed: u64,
    files: Vec<&'a str>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "na".to_string(),
    }
}

fn planning_csv(report: &PlanningReport) -> String {
    let mut out = String::from("mode,sigma,K,ttc_mean,ttc_ci,track_mean,track_ci,n_episodes\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.mode.label(),
            r.sigma,
            r.k,
            r.ttc_mean,
            r.ttc_ci,
            r.track_mean,
            r.track_ci,
            r.n_episodes
        ));
    }
    out
}

/// Writes the report sections as CSV files plus `manifest.json`, and returns
/// the paths written. Emission is pure serialization: re-emitting the same
/// report yields byte-identical files.
pub fn emit_report(report: &Report, config_text: &str, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.is_empty() {
        return Err(Error::Usage("refusing to emit an empty report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut files: Vec<(&str, String)> = Vec::new();

    if !report.forecast.is_empty() {
        let mut out = String::from(
            "sigma,minfde16,fde1,risk_err4,risk_abs_err4,\
             se_minfde16,se_fde1,se_risk_err4,se_risk_abs_err4\n",
        );
        for r in &report.forecast {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.sigma.map_or_else(|| "unbiased".to_string(), |s| format!("{s}")),
                r.minfde16,
                r.fde1,
                fmt_opt(r.risk_err4),
                fmt_opt(r.risk_abs_err4),
                r.se_minfde16,
                r.se_fde1,
                fmt_opt(r.se_risk_err4),
                fmt_opt(r.se_risk_abs_err4),
            ));
        }
        files.push(("forecast_eval.csv", out));
    }
    if !report.risk_curves.is_empty() {
        let mut out = String::from("method,sigma,K,err_mean,err_q05,err_q95\n");
        for p in &report.risk_curves {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.method.label(),
                p.sigma,
                p.k,
                p.err_mean,
                p.err_q05,
                p.err_q95
            ));
        }
        files.push(("risk_curves.csv", out));
    }
    if let Some(planning) = &report.planning {
        files.push(("planning.csv", planning_csv(planning)));
    }
    if let Some(shifted) = &report.planning_shifted {
        files.push(("planning_shifted.csv", planning_csv(shifted)));
    }

    let manifest = Manifest {
        config_sha256: format!("{:x}", Sha256::digest(config_text.as_bytes())),
        seed,
        files: files.iter().map(|(name, _)| *name).collect(),
    };
    let manifest_text =
        serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    files.push(("manifest.json", manifest_text + "\n"));

    let mut paths = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biaser::RobotConditioning;
    use crate::cvae::CvaeArch;
    use crate::sim::RobotFlavor;

    fn tiny_sim() -> SimConfig {
        SimConfig {
            past_steps: 3,
            future_steps: 4,
            robot_speed: 8.0,
            spawn_x_min: 2.0,
            spawn_x_max: 4.0,
            spawn_y_min: 1.0,
            spawn_y_max: 2.0,
            robot_flavor: RobotFlavor::RandomizedAccel,
            ..SimConfig::default()
        }
    }

    /// Random decoder, but the prior and the biased encoder are both zeroed
    /// to the standard normal, so biased and unbiased forecasts share one
    /// distribution.
    fn calibrated_pair(seed: u64) -> (CvaeModel, BiaserModel) {
        let arch = CvaeArch { past_steps: 3, future_steps: 4, latent_dim: 2, hidden: 8, layers: 2 };
        let mut cvae = CvaeModel::init(arch, 0.1, &mut stream_rng(seed, 0)).unwrap();
        for t in cvae.prior_net.params_mut() {
            t.data_mut().fill(0.0);
        }
        let mut biaser =
            BiaserModel::init(&cvae, RobotConditioning::Future, &mut stream_rng(seed, 1)).unwrap();
        for t in biaser.encoder.params_mut() {
            t.data_mut().fill(0.0);
        }
        (cvae, biaser)
    }

    fn random_pair(seed: u64) -> (CvaeModel, BiaserModel) {
        let arch = CvaeArch { past_steps: 3, future_steps: 4, latent_dim: 2, hidden: 8, layers: 2 };
        let cvae = CvaeModel::init(arch, 0.1, &mut stream_rng(seed, 0)).unwrap();
        let biaser =
            BiaserModel::init(&cvae, RobotConditioning::Future, &mut stream_rng(seed, 1)).unwrap();
        (cvae, biaser)
    }

    fn small_eval_config() -> ForecastEvalConfig {
        ForecastEvalConfig {
            ref_samples: 128,
            fde_samples: 8,
            risk_samples: 4,
            sigmas: vec![0.0, 0.95],
        }
    }

    #[test]
    fn forecast_eval_rows_have_the_documented_shape() {
        let (cvae, biaser) = random_pair(11);
        let scenes = generate_dataset(12, &tiny_sim(), 5).unwrap().scenes;
        let config = small_eval_config();
        let rows =
            run_forecast_eval(&cvae, &biaser, &scenes, &config, &TtcParams::default(), 9).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].sigma, None);
        assert!(rows[0].risk_err4.is_none() && rows[0].se_risk_err4.is_none());
        assert_eq!(rows[1].sigma, Some(0.0));
        assert_eq!(rows[2].sigma, Some(0.95));
        for row in &rows {
            assert!(row.minfde16.is_finite() && row.minfde16 >= 0.0);
            assert!(row.minfde16 <= row.fde1 + 1e-12);
            if let (Some(err), Some(abs)) = (row.risk_err4, row.risk_abs_err4) {
                assert!(abs >= err.abs() - 1e-12);
            }
        }
        let again =
            run_forecast_eval(&cvae, &biaser, &scenes, &config, &TtcParams::default(), 9).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn prior_copy_biaser_gives_sigma_independent_displacement_errors() {
        // With the prior and the biased encoder both zeroed, the shared noise
        // matrix decodes to identical latents everywhere, so displacement
        // metrics match exactly across the unbiased row and every sigma row,
        // and the signed risk error decreases as the reference risk grows.
        let (cvae, biaser) = calibrated_pair(13);
        let scenes = generate_dataset(16, &tiny_sim(), 6).unwrap().scenes;
        let config = small_eval_config();
        let rows =
            run_forecast_eval(&cvae, &biaser, &scenes, &config, &TtcParams::default(), 3).unwrap();
        assert_eq!(rows[0].minfde16, rows[1].minfde16);
        assert_eq!(rows[0].fde1, rows[1].fde1);
        assert_eq!(rows[1].minfde16, rows[2].minfde16);
        assert_eq!(rows[1].fde1, rows[2].fde1);
        assert!(rows[1].risk_err4.unwrap() > rows[2].risk_err4.unwrap());
    }

    #[test]
    fn risk_error_stats_recover_known_signs() {
        let (cvae, biaser) = calibrated_pair(17);
        let scenes = generate_dataset(32, &tiny_sim(), 7).unwrap().scenes;
        let ttc = TtcParams::default();
        let ks = [1, 2, 4];

        // At sigma 0 both estimators target the plain mean and are unbiased.
        let neutral =
            risk_error_stats(&cvae, &biaser, &scenes, 0.0, &ks, 512, &ttc, 21).unwrap();
        assert_eq!(neutral.len(), 6);
        for p in &neutral {
            assert!(p.err_mean.abs() <= 3.0 * p.err_se, "{p:?} should be unbiased");
            assert!(p.err_q05 <= p.err_q95);
            assert_eq!(p.n_scenes, 32);
        }

        // In the tail, few-sample Monte-Carlo estimation underestimates.
        let tail = risk_error_stats(&cvae, &biaser, &scenes, 0.95, &ks, 512, &ttc, 21).unwrap();
        for p in tail.iter().filter(|p| p.method == RiskMethod::UnbiasedCvar) {
            assert!(p.err_mean < 0.0, "{p:?} should underestimate the tail");
        }

        let again = risk_error_stats(&cvae, &biaser, &scenes, 0.95, &ks, 512, &ttc, 21).unwrap();
        assert_eq!(tail, again);

        assert!(matches!(
            risk_error_stats(&cvae, &biaser, &scenes, 0.95, &[], 512, &ttc, 21),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            risk_error_stats(&cvae, &biaser, &scenes, 0.95, &[600], 512, &ttc, 21),
            Err(Error::Domain(_))
        ));
    }

    fn tiny_planning(n_episodes: usize) -> PlanningConfig {
        PlanningConfig {
            n_episodes,
            sigmas: vec![0.8],
            ks: vec![1],
            include_risk_neutral: false,
            cem: CemConfig {
                n_robot_samples: 10,
                n_elites: 3,
                n_iter: 2,
                ..CemConfig::default()
            },
            ..PlanningConfig::default()
        }
    }

    #[test]
    fn planning_experiment_is_deterministic_and_cis_shrink_with_episodes() {
        let (cvae, biaser) = random_pair(19);
        let sim = tiny_sim();
        let ttc = TtcParams::default();
        let small =
            run_planning_experiment(&cvae, &biaser, &sim, &tiny_planning(25), &ttc, 4).unwrap();
        let large =
            run_planning_experiment(&cvae, &biaser, &sim, &tiny_planning(100), &ttc, 4).unwrap();
        assert_eq!(small.rows.len(), 2);
        assert_eq!(small.rows[0].mode, PlanMode::RiskSensitiveUnbiased);
        assert_eq!(small.rows[1].mode, PlanMode::RiskNeutralBiased);
        assert_eq!(small.rows[0].n_episodes, 25);
        assert_eq!(large.rows[0].n_episodes, 100);
        for (s, l) in small.rows.iter().zip(&large.rows) {
            assert!(s.ttc_ci > 0.0 && l.ttc_ci > 0.0, "degenerate cost spread");
            let ratio = s.ttc_ci / l.ttc_ci;
            assert!((1.2..=3.4).contains(&ratio), "CI ratio {ratio} not near sqrt(4)");
        }
        let again =
            run_planning_experiment(&cvae, &biaser, &sim, &tiny_planning(25), &ttc, 4).unwrap();
        assert_eq!(small, again);
    }

    #[test]
    fn planning_with_risk_neutral_cell_and_speed_shift() {
        let (cvae, biaser) = random_pair(23);
        let sim = tiny_sim();
        let config = PlanningConfig {
            include_risk_neutral: true,
            speed_scale: 0.75,
            ks: vec![1, 2],
            ..tiny_planning(8)
        };
        let report =
            run_planning_experiment(&cvae, &biaser, &sim, &config, &TtcParams::default(), 1)
                .unwrap();
        // Baseline cell first, at the largest sample count and sigma 0.
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.rows[0].mode, PlanMode::RiskSensitiveUnbiased);
        assert_eq!(report.rows[0].sigma, 0.0);
        assert_eq!(report.rows[0].k, 2);
        assert_eq!(report.speed_scale, 0.75);

        let empty = PlanningConfig { sigmas: vec![], include_risk_neutral: false, ..config };
        assert!(matches!(
            run_planning_experiment(
                &cvae,
                &biaser,
                &sim,
                &empty,
                &TtcParams::default(),
                1
            ),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn report_emission_is_reproducible_and_rejects_empty_reports() {
        let dir = tempfile::tempdir().unwrap();
        let report = Report {
            forecast: vec![ForecastEvalRow {
                sigma: None,
                minfde16: 0.5,
                fde1: 0.75,
                risk_err4: None,
                risk_abs_err4: None,
                se_minfde16: 0.01,
                se_fde1: 0.02,
                se_risk_err4: None,
                se_risk_abs_err4: None,
            }],
            risk_curves: vec![RiskCurvePoint {
                method: RiskMethod::BiasedMean,
                sigma: 0.95,
                k: 4,
                err_mean: -0.01,
                err_se: 0.002,
                err_abs_mean: 0.015,
                err_q05: -0.04,
                err_q95: 0.02,
                n_scenes: 500,
            }],
            planning: Some(PlanningReport {
                rows: vec![PlanningRow {
                    mode: PlanMode::RiskNeutralBiased,
                    sigma: 0.95,
                    k: 1,
                    ttc_mean: 0.34,
                    ttc_ci: 0.02,
                    track_mean: 1.5,
                    track_ci: 0.1,
                    n_episodes: 100,
                }],
                speed_scale: 1.0,
            }),
            planning_shifted: None,
        };
        let paths = emit_report(&report, "seed = 7\n", 7, dir.path()).unwrap();
        let names: Vec<_> =
            paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["forecast_eval.csv", "risk_curves.csv", "planning.csv", "manifest.json"]);

        let forecast = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(
            forecast,
            "sigma,minfde16,fde1,risk_err4,risk_abs_err4,\
             se_minfde16,se_fde1,se_risk_err4,se_risk_abs_err4\n\
             unbiased,0.5,0.75,na,na,0.01,0.02,na,na\n"
        );
        let curves = std::fs::read_to_string(&paths[1]).unwrap();
        assert_eq!(
            curves,
            "method,sigma,K,err_mean,err_q05,err_q95\nbiased_mean,0.95,4,-0.01,-0.04,0.02\n"
        );
        let planning = std::fs::read_to_string(&paths[2]).unwrap();
        assert_eq!(
            planning,
            "mode,sigma,K,ttc_mean,ttc_ci,track_mean,track_ci,n_episodes\n\
             risk_neutral_biased,0.95,1,0.34,0.02,1.5,0.1,100\n"
        );
        let manifest = std::fs::read_to_string(&paths[3]).unwrap();
        assert!(manifest.contains("\"seed\": 7"));
        assert!(manifest.contains(&format!(
            "{:x}",
            Sha256::digest("seed = 7\n".as_bytes())
        )));
        assert!(!manifest.to_lowercase().contains("time"));

        let before: Vec<String> =
            paths.iter().map(|p| std::fs::read_to_string(p).unwrap()).collect();
        emit_report(&report, "seed = 7\n", 7, dir.path()).unwrap();
        let after: Vec<String> =
            paths.iter().map(|p| std::fs::read_to_string(p).unwrap()).collect();
        assert_eq!(before, after);

        assert!(matches!(
            emit_report(&Report::default(), "", 0, dir.path()),
            Err(Error::Usage(_))
        ));
    }
}
