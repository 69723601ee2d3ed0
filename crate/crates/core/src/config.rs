//! One TOML file configures every stage: data generation, training,
//! evaluation, planning, and report emission.
//!
//! Unknown keys are rejected, every field has a documented default (an empty
//! file is a valid config), and a parsed config serializes back to TOML and
//! reparses to an equal value. Artifact locations are all derived from a
//! single output directory, so no stage can write anywhere else.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::biaser::BiasTrainConfig;
use crate::cvae::{CvaeArch, CvaeTrainConfig};
use crate::error::{Error, Result};
use crate::experiments::{ForecastEvalConfig, PlanningConfig, RiskCurveConfig};
use crate::planner::CemConfig;
use crate::sim::SimConfig;
use crate::ttc::{GridSpec, TtcParams};

fn in_section(result: Result<()>, section: &str) -> Result<()> {
    result.map_err(|e| Error::Config { path: section.to_string(), detail: e.to_string() })
}

/// Root of the artifact tree; every output path hangs off `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_dir: PathBuf::from("out") }
    }
}

impl PathsConfig {
    pub fn train_data(&self) -> PathBuf {
        self.out_dir.join("train_scenes.json")
    }
    pub fn val_data(&self) -> PathBuf {
        self.out_dir.join("val_scenes.json")
    }
    pub fn cvae_checkpoint(&self) -> PathBuf {
        self.out_dir.join("cvae.ckpt")
    }
    pub fn biaser_checkpoint(&self) -> PathBuf {
        self.out_dir.join("biaser.ckpt")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }
    pub fn training_curve(&self, model: &str) -> PathBuf {
        self.out_dir.join(format!("{model}_training.csv"))
    }
    pub fn plan_csv(&self) -> PathBuf {
        self.out_dir.join("plan.csv")
    }
    pub fn plan_json(&self) -> PathBuf {
        self.out_dir.join("plan.json")
    }
    pub fn cost_map_csv(&self) -> PathBuf {
        self.out_dir.join("cost_map.csv")
    }
    pub fn latent_map_csv(&self) -> PathBuf {
        self.out_dir.join("latent_map.csv")
    }
    pub fn latent_map_json(&self) -> PathBuf {
        self.out_dir.join("latent_map.json")
    }
}

/// How many scenes to generate for each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_scenes: 20_000, val_scenes: 500 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Domain("scene counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Forecaster size knobs plus its training schedule. The trajectory window
/// lengths come from the simulation section, so they cannot disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeSection {
    pub latent_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub train: CvaeTrainConfig,
}

impl Default for CvaeSection {
    fn default() -> Self {
        let arch = CvaeArch::default();
        CvaeSection {
            latent_dim: arch.latent_dim,
            hidden: arch.hidden,
            layers: arch.layers,
            train: CvaeTrainConfig::default(),
        }
    }
}

impl CvaeSection {
    pub fn arch(&self, sim: &SimConfig) -> CvaeArch {
        CvaeArch {
            past_steps: sim.past_steps,
            future_steps: sim.future_steps,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Domain("latent_dim, hidden, and layers must be at least 1".into()));
        }
        self.train.validate()
    }
}

/// Evaluation suite parameters plus the test-time pedestrian speed shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentsSection {
    pub forecast: ForecastEvalConfig,
    pub risk: RiskCurveConfig,
    pub planning: PlanningConfig,
    /// Pedestrian speed multiplier for the shifted planning run.
    pub ood_speed_scale: f64,
}

impl Default for ExperimentsSection {
    fn default() -> Self {
        ExperimentsSection {
            forecast: ForecastEvalConfig::default(),
            risk: RiskCurveConfig::default(),
            planning: PlanningConfig::default(),
            ood_speed_scale: 0.75,
        }
    }
}

impl ExperimentsSection {
    pub fn validate(&self) -> Result<()> {
        in_section(self.forecast.validate(), "experiments.forecast")?;
        in_section(self.risk.validate(), "experiments.risk")?;
        in_section(self.planning.validate(), "experiments.planning")?;
        if !(self.ood_speed_scale.is_finite() && self.ood_speed_scale > 0.0) {
            return Err(Error::Config {
                path: "experiments.ood_speed_scale".into(),
                detail: format!("must be strictly positive, got {}", self.ood_speed_scale),
            });
        }
        Ok(())
    }
}

/// Grids for the spatial cost map and the latent-space cost map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapsConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    /// Probe agent speed for the spatial map, m/s.
    pub probe_speed: f64,
    /// Probe agent heading in radians from +x.
    pub probe_heading: f64,
    /// Latent map half-width in latent standard normal units.
    pub latent_halfwidth: f64,
    pub latent_resolution: f64,
    /// Risk levels whose biased latent ellipses annotate the latent map.
    pub sigmas: Vec<f64>,
    /// Validation scene the latent map is computed for.
    pub scene_index: usize,
}

impl Default for MapsConfig {
    fn default() -> Self {
        MapsConfig {
            x_min: -20.0,
            x_max: 80.0,
            y_min: -8.0,
            y_max: 8.0,
            resolution: 0.5,
            probe_speed: 1.5,
            probe_heading: -std::f64::consts::FRAC_PI_2,
            latent_halfwidth: 3.0,
            latent_resolution: 0.1,
            sigmas: vec![0.3, 0.8, 0.95],
            scene_index: 0,
        }
    }
}

impl MapsConfig {
    pub fn cost_grid(&self) -> GridSpec {
        GridSpec {
            x_min: self.x_min,
            x_max: self.x_max,
            y_min: self.y_min,
            y_max: self.y_max,
            resolution: self.resolution,
        }
    }

    pub fn latent_grid(&self) -> GridSpec {
        GridSpec {
            x_min: -self.latent_halfwidth,
            x_max: self.latent_halfwidth,
            y_min: -self.latent_halfwidth,
            y_max: self.latent_halfwidth,
            resolution: self.latent_resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cost_grid().validate()?;
        self.latent_grid().validate()?;
        if !(self.probe_speed.is_finite() && self.probe_speed >= 0.0) {
            return Err(Error::Domain(format!(
                "probe_speed must be non-negative, got {}",
                self.probe_speed
            )));
        }
        if !self.probe_heading.is_finite() {
            return Err(Error::Domain("probe_heading must be finite".into()));
        }
        for s in &self.sigmas {
            if !(0.0..=1.0).contains(s) {
                return Err(Error::Domain(format!("risk level must lie in [0, 1], got {s}")));
            }
        }
        Ok(())
    }
}

/// Complete run configuration; an empty TOML file parses to the defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub sim: SimConfig,
    pub ttc: TtcParams,
    pub cvae: CvaeSection,
    pub biaser: BiasTrainConfig,
    pub planner: CemConfig,
    pub experiments: ExperimentsSection,
    pub maps: MapsConfig,
}

impl RunConfig {
    /// Parses and validates TOML text; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_string(),
            detail: e.to_string().replace('\n', " ").trim().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        in_section(self.data.validate(), "data")?;
        in_section(self.sim.validate(), "sim")?;
        in_section(self.ttc.validate(), "ttc")?;
        in_section(self.cvae.validate(), "cvae")?;
        in_section(self.biaser.validate(), "biaser")?;
        in_section(self.planner.validate(), "planner")?;
        self.experiments.validate()?;
        in_section(self.maps.validate(), "maps")?;
        Ok(())
    }
}
