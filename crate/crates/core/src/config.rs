//! Experiment configuration in TOML, with defaults for the adaptive cruise
//! control study.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conic::SolverSettings;
use crate::controller::{Controller, ControllerKind, ControllerSettings};
use crate::dynamics::{AccParams, AccPlant, Certificate};
use crate::error::{Error, Result};
use crate::gp::ResidualGp;
use crate::kernels::{AdpKernel, BaseKernel};
use crate::simulation::{EpisodeConfig, GridAxis, LearningSetup, StopPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub mass: f64,
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
    /// Lead vehicle speed.
    pub v0: f64,
}

impl PlantConfig {
    fn from_params(p: &AccParams) -> Self {
        PlantConfig {
            mass: p.mass,
            f0: p.f0,
            f1: p.f1,
            f2: p.f2,
            v0: p.v0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantsConfig {
    #[serde(rename = "true")]
    pub true_plant: PlantConfig,
    pub nominal: PlantConfig,
}

impl Default for PlantsConfig {
    fn default() -> Self {
        PlantsConfig {
            true_plant: PlantConfig::from_params(&AccParams::true_plant()),
            nominal: PlantConfig::from_params(&AccParams::nominal_model()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateConfig {
    /// CLF decay rate λ.
    pub clf_rate: f64,
    /// CBF class-K slope γ₀.
    pub cbf_rate: f64,
    pub v_desired: f64,
    pub time_headway: f64,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        let p = AccParams::nominal_model();
        CertificateConfig {
            clf_rate: 1.0,
            cbf_rate: 1.0,
            v_desired: p.v_desired,
            time_headway: p.time_headway,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    SquaredExponential,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub variance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lengthscales: Vec<f64>,
}

impl KernelConfig {
    fn se(variance: f64, lengthscales: &[f64]) -> Self {
        KernelConfig {
            kind: KernelKind::SquaredExponential,
            variance,
            lengthscales: lengthscales.to_vec(),
        }
    }

    pub fn build(&self) -> Result<BaseKernel> {
        match self.kind {
            KernelKind::SquaredExponential => {
                BaseKernel::squared_exponential(self.variance, self.lengthscales.clone())
            }
            KernelKind::Constant => {
                if !self.lengthscales.is_empty() {
                    return Err(Error::Config(
                        "constant kernel takes no lengthscales".into(),
                    ));
                }
                BaseKernel::constant(self.variance)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub noise_std: f64,
    pub beta: f64,
    /// Confidence level parameter; `1 - delta` is the nominal coverage.
    pub delta: f64,
    /// One component per augmented input entry: drift first, then one per
    /// control.
    pub kernel_v: Vec<KernelConfig>,
    pub kernel_b: Vec<KernelConfig>,
}

impl Default for GpConfig {
    fn default() -> Self {
        let ls = [5.0, 50.0];
        GpConfig {
            noise_std: 0.01,
            beta: 2.0,
            delta: 0.05,
            kernel_v: vec![KernelConfig::se(1e-2, &ls), KernelConfig::se(1e-4, &ls)],
            kernel_b: vec![KernelConfig::se(1e-2, &ls), KernelConfig::se(1e-6, &ls)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub slack_weight: f64,
    pub control_scale: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub precheck: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            slack_weight: 100.0,
            control_scale: AccParams::nominal_model().mass,
            tol: 1e-10,
            max_iter: 100,
            precheck: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub x0: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
    /// Episode budget.
    pub episodes: usize,
    pub retention_stride: usize,
    pub stop_policy: StopPolicy,
    pub measurement_noise: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        SimulationConfig {
            x0: e.x0,
            dt: e.dt,
            horizon: e.horizon,
            episodes: 15,
            retention_stride: e.retention_stride,
            stop_policy: e.stop_policy,
            measurement_noise: e.measurement_noise,
            seed: e.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: Vec<usize>,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            lo: vec![12.0, 20.0],
            hi: vec![26.0, 110.0],
            points: vec![29, 31],
        }
    }
}

impl MapConfig {
    pub fn axes(&self) -> Result<Vec<GridAxis>> {
        if self.lo.len() != self.hi.len() || self.lo.len() != self.points.len() {
            return Err(Error::Config(format!(
                "map: lo, hi and points must have equal length ({}, {}, {})",
                self.lo.len(),
                self.hi.len(),
                self.points.len()
            )));
        }
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(&self.points)
            .map(|((&lo, &hi), &points)| {
                if !(lo <= hi) || points == 0 {
                    return Err(Error::Config(format!(
                        "map axis [{lo}, {hi}] with {points} points is invalid"
                    )));
                }
                Ok(GridAxis { lo, hi, points })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub plant: PlantsConfig,
    pub certificates: CertificateConfig,
    pub gp: GpConfig,
    pub controller: ControllerConfig,
    pub simulation: SimulationConfig,
    pub map: MapConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            plant: PlantsConfig::default(),
            certificates: CertificateConfig::default(),
            gp: GpConfig::default(),
            controller: ControllerConfig::default(),
            simulation: SimulationConfig::default(),
            map: MapConfig::default(),
        }
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} must be positive and finite, got {v}"
        )))
    }
}

impl ExperimentConfig {
    /// Parses and validates. Parse errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, e: Error| Error::Config(format!("{section}: {e}"));
        self.true_params()
            .validate()
            .map_err(|e| wrap("plant.true", e))?;
        self.nominal_params()
            .validate()
            .map_err(|e| wrap("plant.nominal", e))?;
        positive("certificates.clf_rate", self.certificates.clf_rate)?;
        positive("certificates.cbf_rate", self.certificates.cbf_rate)?;
        positive("gp.noise_std", self.gp.noise_std)?;
        if !(self.gp.beta >= 0.0 && self.gp.beta.is_finite()) {
            return Err(Error::Config(format!(
                "gp.beta must be nonnegative, got {}",
                self.gp.beta
            )));
        }
        if !(self.gp.delta > 0.0 && self.gp.delta < 1.0) {
            return Err(Error::Config(format!(
                "gp.delta must lie in (0, 1), got {}",
                self.gp.delta
            )));
        }
        self.kernel_v().map_err(|e| wrap("gp.kernel_v", e))?;
        self.kernel_b().map_err(|e| wrap("gp.kernel_b", e))?;
        for (name, k) in [
            ("gp.kernel_v", self.kernel_v()?),
            ("gp.kernel_b", self.kernel_b()?),
        ] {
            if k.control_dim() != 1 {
                return Err(Error::Config(format!(
                    "{name} needs 2 components for the cruise control plant, got {}",
                    k.components().len()
                )));
            }
            if k.state_dim().is_some_and(|n| n != 2) {
                return Err(Error::Config(format!(
                    "{name} lengthscales must have length 2"
                )));
            }
        }
        self.controller_settings()
            .validate()
            .map_err(|e| wrap("controller", e))?;
        if self.simulation.x0.len() != 2 {
            return Err(Error::Config(format!(
                "simulation.x0 must have 2 entries, got {}",
                self.simulation.x0.len()
            )));
        }
        if self.simulation.episodes == 0 {
            return Err(Error::Config(
                "simulation.episodes must be at least 1".into(),
            ));
        }
        self.episode_config()
            .validate()
            .map_err(|e| wrap("simulation", e))?;
        let axes = self.map.axes()?;
        if axes.len() != 2 {
            return Err(Error::Config(format!(
                "map needs 2 axes, got {}",
                axes.len()
            )));
        }
        Ok(())
    }

    fn params(&self, p: &PlantConfig) -> AccParams {
        AccParams {
            mass: p.mass,
            f0: p.f0,
            f1: p.f1,
            f2: p.f2,
            v0: p.v0,
            v_desired: self.certificates.v_desired,
            time_headway: self.certificates.time_headway,
        }
    }

    pub fn true_params(&self) -> AccParams {
        self.params(&self.plant.true_plant)
    }

    pub fn nominal_params(&self) -> AccParams {
        self.params(&self.plant.nominal)
    }

    pub fn kernel_v(&self) -> Result<AdpKernel> {
        AdpKernel::new(
            self.gp
                .kernel_v
                .iter()
                .map(KernelConfig::build)
                .collect::<Result<_>>()?,
        )
    }

    pub fn kernel_b(&self) -> Result<AdpKernel> {
        AdpKernel::new(
            self.gp
                .kernel_b
                .iter()
                .map(KernelConfig::build)
                .collect::<Result<_>>()?,
        )
    }

    pub fn controller_settings(&self) -> ControllerSettings {
        ControllerSettings {
            slack_weight: self.controller.slack_weight,
            control_scale: self.controller.control_scale,
            solver: SolverSettings {
                tol: self.controller.tol,
                max_iter: self.controller.max_iter,
            },
            precheck: self.controller.precheck,
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        let s = &self.simulation;
        EpisodeConfig {
            x0: s.x0.clone(),
            dt: s.dt,
            horizon: s.horizon,
            stop_policy: s.stop_policy,
            retention_stride: s.retention_stride,
            measurement_noise: s.measurement_noise,
            seed: s.seed,
        }
    }
}

/// Plants, certificates and kernels built from a configuration.
#[derive(Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub true_plant: AccPlant,
    pub nominal: AccPlant,
    pub clf: Certificate,
    pub cbf: Certificate,
    pub kernel_v: AdpKernel,
    pub kernel_b: AdpKernel,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let c = &config.certificates;
        Ok(Experiment {
            true_plant: AccPlant::new(config.true_params())?,
            nominal: AccPlant::new(config.nominal_params())?,
            clf: Certificate::acc_clf(c.v_desired, c.clf_rate)?,
            cbf: Certificate::acc_cbf(c.time_headway, c.cbf_rate)?,
            kernel_v: config.kernel_v()?,
            kernel_b: config.kernel_b()?,
            config,
        })
    }

    pub fn controller<'a>(
        &'a self,
        kind: ControllerKind,
        gp_v: Option<&'a ResidualGp>,
        gp_b: Option<&'a ResidualGp>,
    ) -> Controller<'a> {
        Controller {
            kind,
            nominal: &self.nominal,
            oracle: Some(&self.true_plant),
            clf: &self.clf,
            cbf: &self.cbf,
            gp_v,
            gp_b,
            settings: self.config.controller_settings(),
        }
    }

    pub fn learning_setup(&self) -> LearningSetup<'_> {
        LearningSetup {
            true_plant: &self.true_plant,
            nominal: &self.nominal,
            clf: &self.clf,
            cbf: &self.cbf,
            kernel_v: self.kernel_v.clone(),
            kernel_b: self.kernel_b.clone(),
            noise_std: self.config.gp.noise_std,
            beta: self.config.gp.beta,
            controller: self.config.controller_settings(),
            episode: self.config.episode_config(),
            budget: self.config.simulation.episodes,
        }
    }
}
