//! Subcommand implementations. Each one loads the effective config, derives
//! a stage-specific seed from the master seed, calls into the library, and
//! writes artifacts under the configured output directory only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use riskcast_core::biaser::{latent_cost_map, load_biaser, save_biaser, train_biaser};
use riskcast_core::config::RunConfig;
use riskcast_core::cvae::{load_cvae, save_cvae, train_cvae};
use riskcast_core::error::{Error, Result};
use riskcast_core::experiments::{
    emit_report, run_forecast_eval, run_planning_experiment, run_risk_curves, PlanningConfig,
    Report,
};
use riskcast_core::geom::Vec2;
use riskcast_core::planner::{
    cem_optimize, make_reference, BiasedForecaster, CemConfig, Forecaster, PlanMode,
    PlanObjectiveSpec, UnbiasedForecaster,
};
use riskcast_core::rng::{item_rng, stream_rng};
use riskcast_core::sim::{generate_dataset, load_dataset, save_dataset, Dataset};
use riskcast_core::ttc::cost_map;

use crate::{Cli, Command, Suite};

// Fixed RNG stream per pipeline stage, so no two stages ever share a
// generator even though they all derive from the one master seed.
const STAGE_GEN_DATA: u64 = 1;
const STAGE_TRAIN_CVAE: u64 = 2;
const STAGE_TRAIN_BIASER: u64 = 3;
const STAGE_FORECAST: u64 = 4;
const STAGE_RISK: u64 = 5;
const STAGE_PLANNING: u64 = 6;
const STAGE_PLANNING_SHIFTED: u64 = 7;
const STAGE_PLAN: u64 = 8;

fn stage_seed(master: u64, stage: u64) -> u64 {
    stream_rng(master, stage).random()
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("worker pool could not be configured: {e}")))?;
    }

    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    apply_overrides(&mut config, &cli.command);
    config.validate()?;
    // Canonical serialization, so the manifest hash reflects the effective
    // config rather than the formatting of the file it came from.
    let config_text = config.to_toml();

    match cli.command {
        Command::GenData => gen_data(&config),
        Command::TrainCvae => train_cvae_cmd(&config),
        Command::TrainBiaser => train_biaser_cmd(&config),
        Command::EvalForecast => eval_forecast(&config, &config_text),
        Command::EvalRisk { .. } => eval_risk(&config, &config_text),
        Command::Plan { scene, mode, sigma, k } => {
            plan(&config, scene, mode.into(), sigma, k)
        }
        Command::Experiment { suite, .. } => experiment(&config, &config_text, suite),
        Command::CostMap => cost_map_cmd(&config),
        Command::LatentMap => latent_map_cmd(&config),
    }
}

/// Folds command-line sweep overrides into the config, so the emitted
/// manifest hash covers exactly what ran.
fn apply_overrides(config: &mut RunConfig, command: &Command) {
    match command {
        Command::EvalRisk { sigma, k } => {
            if !sigma.is_empty() {
                config.experiments.risk.sigmas = sigma.clone();
            }
            if !k.is_empty() {
                config.experiments.risk.ks = k.clone();
            }
        }
        Command::Experiment { episodes: Some(n), .. } => {
            config.experiments.planning.n_episodes = *n;
        }
        _ => {}
    }
}

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.paths.out_dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_val_scenes(config: &RunConfig) -> Result<Dataset> {
    load_dataset(&config.paths.val_data())
}

fn gen_data(config: &RunConfig) -> Result<()> {
    ensure_out_dir(config)?;
    let mut seeder = stream_rng(config.seed, STAGE_GEN_DATA);
    let train_seed: u64 = seeder.random();
    let val_seed: u64 = seeder.random();

    let train = generate_dataset(config.data.train_scenes, &config.sim, train_seed)?;
    save_dataset(&config.paths.train_data(), &train)?;
    println!("wrote {} ({} scenes)", config.paths.train_data().display(), train.scenes.len());

    let val = generate_dataset(config.data.val_scenes, &config.sim, val_seed)?;
    save_dataset(&config.paths.val_data(), &val)?;
    println!("wrote {} ({} scenes)", config.paths.val_data().display(), val.scenes.len());
    Ok(())
}

fn train_cvae_cmd(config: &RunConfig) -> Result<()> {
    ensure_out_dir(config)?;
    let dataset = load_dataset(&config.paths.train_data())?;
    let arch = config.cvae.arch(&config.sim);
    let seed = stage_seed(config.seed, STAGE_TRAIN_CVAE);
    let (model, curve) = train_cvae(&dataset, arch, &config.cvae.train, seed)?;

    save_cvae(&config.paths.cvae_checkpoint(), &model)?;
    println!("wrote {}", config.paths.cvae_checkpoint().display());

    let mut csv = String::from("epoch,loss,kl,recon\n");
    for row in &curve {
        writeln!(csv, "{},{},{},{}", row.epoch, row.loss, row.kl, row.recon).unwrap();
    }
    write_text(&config.paths.training_curve("cvae"), &csv)?;
    if let Some(last) = curve.last() {
        println!("final loss {} (kl {}, recon {})", last.loss, last.kl, last.recon);
    }
    Ok(())
}

fn train_biaser_cmd(config: &RunConfig) -> Result<()> {
    ensure_out_dir(config)?;
    let dataset = load_dataset(&config.paths.train_data())?;
    let cvae = load_cvae(&config.paths.cvae_checkpoint())?;
    let seed = stage_seed(config.seed, STAGE_TRAIN_BIASER);
    let (model, curve) = train_biaser(&cvae, &dataset, &config.biaser, &config.ttc, seed)?;

    save_biaser(&config.paths.biaser_checkpoint(), &model)?;
    println!("wrote {}", config.paths.biaser_checkpoint().display());

    let mut csv = String::from("phase,epoch,loss,kl,penalty\n");
    for row in &curve {
        writeln!(csv, "{},{},{},{},{}", row.phase, row.epoch, row.loss, row.kl, row.penalty)
            .unwrap();
    }
    write_text(&config.paths.training_curve("biaser"), &csv)?;
    if let Some(last) = curve.last() {
        println!("final loss {} (kl {}, penalty {})", last.loss, last.kl, last.penalty);
    }
    Ok(())
}

fn eval_forecast(config: &RunConfig, config_text: &str) -> Result<()> {
    let val = load_val_scenes(config)?;
    let cvae = load_cvae(&config.paths.cvae_checkpoint())?;
    let biaser = load_biaser(&config.paths.biaser_checkpoint())?;
    let seed = stage_seed(config.seed, STAGE_FORECAST);
    let report = Report {
        forecast: run_forecast_eval(
            &cvae,
            &biaser,
            &val.scenes,
            &config.experiments.forecast,
            &config.ttc,
            seed,
        )?,
        ..Report::default()
    };
    emit(&report, config, config_text)
}

fn eval_risk(config: &RunConfig, config_text: &str) -> Result<()> {
    let val = load_val_scenes(config)?;
    let cvae = load_cvae(&config.paths.cvae_checkpoint())?;
    let biaser = load_biaser(&config.paths.biaser_checkpoint())?;
    let seed = stage_seed(config.seed, STAGE_RISK);
    let report = Report {
        risk_curves: run_risk_curves(
            &cvae,
            &biaser,
            &val.scenes,
            &config.experiments.risk,
            &config.ttc,
            seed,
        )?,
        ..Report::default()
    };
    emit(&report, config, config_text)
}

fn experiment(config: &RunConfig, config_text: &str, suite: Suite) -> Result<()> {
    let cvae = load_cvae(&config.paths.cvae_checkpoint())?;
    let biaser = load_biaser(&config.paths.biaser_checkpoint())?;
    let mut report = Report::default();

    if matches!(suite, Suite::Forecast | Suite::Risk | Suite::All) {
        let val = load_val_scenes(config)?;
        if matches!(suite, Suite::Forecast | Suite::All) {
            report.forecast = run_forecast_eval(
                &cvae,
                &biaser,
                &val.scenes,
                &config.experiments.forecast,
                &config.ttc,
                stage_seed(config.seed, STAGE_FORECAST),
            )?;
        }
        if matches!(suite, Suite::Risk | Suite::All) {
            report.risk_curves = run_risk_curves(
                &cvae,
                &biaser,
                &val.scenes,
                &config.experiments.risk,
                &config.ttc,
                stage_seed(config.seed, STAGE_RISK),
            )?;
        }
    }
    if matches!(suite, Suite::Planning | Suite::All) {
        let nominal = &config.experiments.planning;
        report.planning = Some(run_planning_experiment(
            &cvae,
            &biaser,
            &config.sim,
            nominal,
            &config.ttc,
            stage_seed(config.seed, STAGE_PLANNING),
        )?);
        let shifted = PlanningConfig {
            speed_scale: nominal.speed_scale * config.experiments.ood_speed_scale,
            ..nominal.clone()
        };
        report.planning_shifted = Some(run_planning_experiment(
            &cvae,
            &biaser,
            &config.sim,
            &shifted,
            &config.ttc,
            stage_seed(config.seed, STAGE_PLANNING_SHIFTED),
        )?);
    }
    emit(&report, config, config_text)
}

fn emit(report: &Report, config: &RunConfig, config_text: &str) -> Result<()> {
    let files = emit_report(report, config_text, config.seed, &config.paths.reports_dir())?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn plan(
    config: &RunConfig,
    scene_index: usize,
    mode: PlanMode,
    sigma: f64,
    k: Option<usize>,
) -> Result<()> {
    let val = load_val_scenes(config)?;
    let scene = val.scenes.get(scene_index).ok_or_else(|| {
        Error::Usage(format!(
            "scene {scene_index} out of range for a {}-scene validation set",
            val.scenes.len()
        ))
    })?;
    let cvae = load_cvae(&config.paths.cvae_checkpoint())?;
    let biaser = load_biaser(&config.paths.biaser_checkpoint())?;
    let sim = &val.config;

    let robot_past = scene.robot_past();
    let init_pos = robot_past.final_position();
    let init_vel = *robot_past.velocities().last().expect("non-empty trajectory");
    let steps = scene.ped_future.len();
    let spec = PlanObjectiveSpec {
        mode,
        sigma,
        q: vec![config.experiments.planning.tracking_weight; steps + 1],
        y_ref: make_reference(init_pos, sim.robot_speed, steps, sim.dt)?,
    };
    let cem = CemConfig {
        n_pred_samples: k.unwrap_or(config.planner.n_pred_samples),
        ..config.planner
    };
    let unbiased = UnbiasedForecaster { cvae: &cvae };
    let biased;
    let predictor: &dyn Forecaster = match mode {
        PlanMode::RiskSensitiveUnbiased => &unbiased,
        PlanMode::RiskNeutralBiased => {
            biased = BiasedForecaster::new(&cvae, &biaser, sigma, Some(robot_past.clone()))?;
            &biased
        }
    };
    let mut rng = item_rng(stage_seed(config.seed, STAGE_PLAN), scene_index as u64, 0);
    let result = cem_optimize(
        &vec![0.0; steps],
        init_pos,
        init_vel,
        &spec,
        &cem,
        predictor,
        &scene.ped_past,
        &config.ttc,
        &mut rng,
    )?;

    ensure_out_dir(config)?;
    let mut csv = String::from("t,x,y,vx,vy,ax\n");
    let mut vel = init_vel;
    for (i, p) in result.trajectory.points().iter().enumerate() {
        let t = i as f64 * sim.dt;
        match result.accels.get(i) {
            Some(&a) => {
                writeln!(csv, "{t},{},{},{},{},{a}", p.x, p.y, vel.x, vel.y).unwrap();
                vel = Vec2::new(vel.x + a * sim.dt, vel.y);
            }
            // The final state has no command left to apply.
            None => writeln!(csv, "{t},{},{},{},{},na", p.x, p.y, vel.x, vel.y).unwrap(),
        }
    }
    write_text(&config.paths.plan_csv(), &csv)?;

    let mut json = serde_json::to_string_pretty(&result.objective)
        .map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_text(&config.paths.plan_json(), &json)?;
    println!(
        "objective {} (risk {}, tracking {})",
        result.objective.objective, result.objective.risk_term, result.objective.tracking_term
    );
    Ok(())
}

fn cost_map_cmd(config: &RunConfig) -> Result<()> {
    ensure_out_dir(config)?;
    // Instantaneous collision cost of a probe pedestrian at each grid cell,
    // against the robot at the origin moving at its cruise speed.
    let map = cost_map(
        Vec2::ZERO,
        Vec2::new(config.sim.robot_speed, 0.0),
        config.maps.probe_speed,
        config.maps.probe_heading,
        &config.maps.cost_grid(),
        &config.ttc,
    )?;
    let mut csv = String::from("x,y,cost\n");
    for (x, y, cost) in map.cells() {
        writeln!(csv, "{x},{y},{cost}").unwrap();
    }
    write_text(&config.paths.cost_map_csv(), &csv)
}

fn latent_map_cmd(config: &RunConfig) -> Result<()> {
    let val = load_val_scenes(config)?;
    let scene = val.scenes.get(config.maps.scene_index).ok_or_else(|| {
        Error::Usage(format!(
            "maps.scene_index {} out of range for a {}-scene validation set",
            config.maps.scene_index,
            val.scenes.len()
        ))
    })?;
    let cvae = load_cvae(&config.paths.cvae_checkpoint())?;
    // The biased-Gaussian overlays need the encoder; without its checkpoint
    // the map is still rendered, just without ellipses.
    let biaser = if config.paths.biaser_checkpoint().exists() {
        Some(load_biaser(&config.paths.biaser_checkpoint())?)
    } else {
        None
    };
    let lcm = latent_cost_map(
        &cvae,
        scene,
        &config.maps.latent_grid(),
        biaser.as_ref(),
        &config.maps.sigmas,
        &config.ttc,
    )?;

    ensure_out_dir(config)?;
    let mut csv = String::from("z1,z2,cost\n");
    for (z1, z2, cost) in lcm.map.cells() {
        writeln!(csv, "{z1},{z2},{cost}").unwrap();
    }
    write_text(&config.paths.latent_map_csv(), &csv)?;

    let mut json = serde_json::to_string_pretty(&lcm.ellipses)
        .map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_text(&config.paths.latent_map_json(), &json)
}
