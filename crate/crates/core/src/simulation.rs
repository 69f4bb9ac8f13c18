//! Closed-loop simulation, residual data collection and episodic learning.

use std::time::Duration;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic::{SocProgram, SolveStatus};
use crate::controller::build_soc_constraint;
use crate::controller::{Controller, ControllerKind, ControllerSettings};
use crate::dynamics::{measure_residuals, Certificate, ControlAffine, ResidualSample, Segment};
use crate::error::{check_dim, Error, Result};
use crate::feasibility::{classify_default, FeasibilityCase, FeasibilityReport};
use crate::gp::{ResidualDataset, ResidualGp};
use crate::kernels::AdpKernel;

/// Classical fourth-order Runge-Kutta step with `u` held constant.
pub fn integrate_step(
    plant: &dyn ControlAffine,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "step must be positive, got {dt}"
        )));
    }
    check_dim("state", plant.state_dim(), x.len())?;
    check_dim("control", plant.control_dim(), u.len())?;
    let k1 = plant.velocity(x, u);
    let k2 = plant.velocity(&(x + &k1 * (dt / 2.0)), u);
    let k3 = plant.velocity(&(x + &k2 * (dt / 2.0)), u);
    let k4 = plant.velocity(&(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState {
            time: f64::NAN,
            state: next.iter().copied().collect(),
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopPolicy {
    /// Stop at the first non-optimal step or unsafe state.
    Infeasible,
    /// Stop only at an unsafe state; a failed step holds the previous input.
    Unsafe,
    /// Always run to the horizon.
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Horizon,
    Infeasible,
    Unsafe,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Horizon => "horizon",
            Termination::Infeasible => "infeasible",
            Termination::Unsafe => "unsafe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub x0: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
    pub stop_policy: StopPolicy,
    /// Keep every k-th segment as a residual sample.
    pub retention_stride: usize,
    /// Half-width of uniform noise added to residual measurements.
    pub measurement_noise: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            x0: vec![20.0, 100.0],
            dt: 0.02,
            horizon: 20.0,
            stop_policy: StopPolicy::Infeasible,
            retention_stride: 5,
            measurement_noise: 0.0,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "horizon {} must be at least dt {}",
                self.horizon, self.dt
            )));
        }
        if self.retention_stride == 0 {
            return Err(Error::InvalidParameter(
                "retention stride must be at least 1".into(),
            ));
        }
        if !(self.measurement_noise >= 0.0 && self.measurement_noise.is_finite()) {
            return Err(Error::InvalidParameter(
                "measurement noise must be nonnegative".into(),
            ));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "initial state must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// One row of a rollout. The last row of a log holds the final state and
/// has no solve status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub d: f64,
    pub v_value: f64,
    pub b_value: f64,
    pub status: Option<SolveStatus>,
    pub case: Option<FeasibilityCase>,
    pub clf_margin: f64,
    pub cbf_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutLog {
    pub controller: ControllerKind,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
    pub samples: Vec<ResidualSample>,
    /// Wall-clock time per controller call; not part of the deterministic
    /// output.
    pub solve_times: Vec<Duration>,
    /// Programs of the steps that did not solve to optimality.
    pub failed_programs: Vec<(f64, SocProgram)>,
}

impl RolloutLog {
    pub fn min_barrier(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.b_value)
            .fold(f64::INFINITY, f64::min)
    }

    /// Time of the first state with `B < 0`.
    pub fn violation_time(&self) -> Option<f64> {
        self.records.iter().find(|r| r.b_value < 0.0).map(|r| r.t)
    }

    /// Reached the horizon with every step optimal and every state safe.
    pub fn fully_feasible(&self) -> bool {
        self.termination == Termination::Horizon
            && self.violation_time().is_none()
            && self
                .records
                .iter()
                .all(|r| r.status.is_none_or(|s| s == SolveStatus::Optimal))
    }

    pub fn final_state(&self) -> &[f64] {
        &self
            .records
            .last()
            .expect("rollout has at least one record")
            .x
    }

    /// Indices `k` where step `k` was optimal with CBF margin above `tol`
    /// and the next recorded state is unsafe.
    pub fn safety_ordering_violations(&self, tol: f64) -> Vec<usize> {
        self.records
            .windows(2)
            .enumerate()
            .filter(|(_, w)| {
                w[0].status == Some(SolveStatus::Optimal)
                    && w[0].cbf_margin > tol
                    && w[0].b_value >= 0.0
                    && w[1].b_value < 0.0
            })
            .map(|(k, _)| k)
            .collect()
    }

    pub fn mean_solve_time(&self) -> Duration {
        if self.solve_times.is_empty() {
            return Duration::ZERO;
        }
        self.solve_times.iter().sum::<Duration>() / self.solve_times.len() as u32
    }
}

/// Runs `controller` on `true_plant` from `cfg.x0`.
pub fn rollout(
    cfg: &EpisodeConfig,
    true_plant: &dyn ControlAffine,
    controller: &Controller<'_>,
) -> Result<RolloutLog> {
    cfg.validate()?;
    let n = true_plant.state_dim();
    let m = true_plant.control_dim();
    check_dim("initial state", n, cfg.x0.len())?;
    let clf = controller.clf;
    let cbf = controller.cbf;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = DVector::from_column_slice(&cfg.x0);
    let mut u_prev = DVector::zeros(m);
    let mut log = RolloutLog {
        controller: controller.kind,
        records: Vec::new(),
        termination: Termination::Horizon,
        samples: Vec::new(),
        solve_times: Vec::new(),
        failed_programs: Vec::new(),
    };
    let steps = cfg.steps();
    let state_record = |t: f64, x: &DVector<f64>| StepRecord {
        t,
        x: x.iter().copied().collect(),
        u: vec![f64::NAN; m],
        d: f64::NAN,
        v_value: clf.value(x),
        b_value: cbf.value(x),
        status: None,
        case: None,
        clf_margin: f64::NAN,
        cbf_margin: f64::NAN,
    };

    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let b = cbf.value(&x);
        if b < 0.0 && cfg.stop_policy != StopPolicy::Horizon {
            log.records.push(state_record(t, &x));
            log.termination = Termination::Unsafe;
            return Ok(log);
        }
        let step = controller.step(&x)?;
        log.solve_times.push(step.solve_time);
        let optimal = step.is_optimal();
        let mut record = StepRecord {
            t,
            x: x.iter().copied().collect(),
            u: step.u.iter().copied().collect(),
            d: step.d,
            v_value: clf.value(&x),
            b_value: b,
            status: Some(step.status),
            case: step.case,
            clf_margin: step.clf_margin,
            cbf_margin: step.cbf_margin,
        };
        let u = if optimal {
            step.u.clone()
        } else {
            log.failed_programs.push((t, step.program.clone()));
            if cfg.stop_policy == StopPolicy::Infeasible {
                log.records.push(record);
                log.termination = Termination::Infeasible;
                return Ok(log);
            }
            record.u = u_prev.iter().copied().collect();
            u_prev.clone()
        };
        log.records.push(record);
        let next = integrate_step(true_plant, &x, &u, cfg.dt).map_err(|e| match e {
            Error::NonFiniteState { state, .. } => Error::NonFiniteState {
                time: t + cfg.dt,
                state,
            },
            other => other,
        })?;
        if k % cfg.retention_stride == 0 {
            let segment = Segment {
                start: x.clone(),
                end: next.clone(),
                control: u.clone(),
                dt: cfg.dt,
            };
            let mut sample = measure_residuals(&segment, clf, cbf, controller.nominal)?;
            if cfg.measurement_noise > 0.0 {
                let a = cfg.measurement_noise;
                sample.z_v += rng.gen_range(-a..=a);
                sample.z_b += rng.gen_range(-a..=a);
            }
            log.samples.push(sample);
        }
        u_prev = u;
        x = next;
    }
    let t_end = steps as f64 * cfg.dt;
    log.records.push(state_record(t_end, &x));
    if cbf.value(&x) < 0.0 && cfg.stop_policy != StopPolicy::Horizon {
        log.termination = Termination::Unsafe;
    }
    Ok(log)
}

/// Splits residual samples into the CLF and CBF datasets.
pub fn datasets_from_samples(
    samples: &[ResidualSample],
    state_dim: usize,
    control_dim: usize,
    noise_std: f64,
) -> Result<(ResidualDataset, ResidualDataset)> {
    let mut dv = ResidualDataset::empty(state_dim, control_dim, noise_std)?;
    let mut db = ResidualDataset::empty(state_dim, control_dim, noise_std)?;
    for s in samples {
        dv.push(&s.x, &s.u, s.z_v)?;
        db.push(&s.x, &s.u, s.z_b)?;
    }
    Ok((dv, db))
}

/// Everything the episodic protocol needs.
#[derive(Clone)]
pub struct LearningSetup<'a> {
    pub true_plant: &'a dyn ControlAffine,
    pub nominal: &'a dyn ControlAffine,
    pub clf: &'a Certificate,
    pub cbf: &'a Certificate,
    pub kernel_v: AdpKernel,
    pub kernel_b: AdpKernel,
    pub noise_std: f64,
    pub beta: f64,
    pub controller: ControllerSettings,
    pub episode: EpisodeConfig,
    pub budget: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    /// 1-based.
    pub index: usize,
    pub log: RolloutLog,
    pub data_added: usize,
    pub data_total: usize,
    /// GPs used by this episode's controller (none for the first).
    pub gp_v: Option<ResidualGp>,
    pub gp_b: Option<ResidualGp>,
}

#[derive(Debug, Clone)]
pub struct LearningResult {
    pub episodes: Vec<EpisodeResult>,
    pub converged: bool,
    /// All retained samples, in collection order.
    pub samples: Vec<ResidualSample>,
}

impl LearningResult {
    pub fn final_episode(&self) -> &EpisodeResult {
        self.episodes.last().expect("at least one episode")
    }

    /// GPs of the last GP-controlled episode.
    pub fn final_gps(&self) -> Option<(&ResidualGp, &ResidualGp)> {
        self.episodes
            .iter()
            .rev()
            .find_map(|e| Some((e.gp_v.as_ref()?, e.gp_b.as_ref()?)))
    }
}

/// Fits both residual GPs on `samples`.
pub fn fit_gps(
    setup: &LearningSetup<'_>,
    samples: &[ResidualSample],
) -> Result<(ResidualGp, ResidualGp)> {
    let (dv, db) = datasets_from_samples(
        samples,
        setup.nominal.state_dim(),
        setup.nominal.control_dim(),
        setup.noise_std,
    )?;
    Ok((
        ResidualGp::fit(dv, setup.kernel_v.clone(), setup.beta)?,
        ResidualGp::fit(db, setup.kernel_b.clone(), setup.beta)?,
    ))
}

/// Episode 1 runs the nominal CBF-CLF-QP; every later episode refits both
/// GPs on all retained data and runs the GP-CBF-CLF-SOCP. Stops at the first
/// fully feasible rollout or when the budget is spent.
pub fn episodic_learning(setup: &LearningSetup<'_>) -> Result<LearningResult> {
    if setup.budget == 0 {
        return Err(Error::InvalidParameter(
            "episode budget must be at least 1".into(),
        ));
    }
    let mut samples: Vec<ResidualSample> = Vec::new();
    let mut episodes = Vec::new();
    let mut converged = false;
    for index in 1..=setup.budget {
        let mut cfg = setup.episode.clone();
        cfg.seed = setup.episode.seed.wrapping_add(index as u64 - 1);
        let (log, gps) = if index == 1 {
            let c = Controller {
                kind: ControllerKind::CbfClfQpNominal,
                nominal: setup.nominal,
                oracle: None,
                clf: setup.clf,
                cbf: setup.cbf,
                gp_v: None,
                gp_b: None,
                settings: setup.controller,
            };
            (rollout(&cfg, setup.true_plant, &c)?, None)
        } else {
            let (gp_v, gp_b) = fit_gps(setup, &samples)?;
            let c = Controller {
                kind: ControllerKind::GpCbfClfSocp,
                nominal: setup.nominal,
                oracle: None,
                clf: setup.clf,
                cbf: setup.cbf,
                gp_v: Some(&gp_v),
                gp_b: Some(&gp_b),
                settings: setup.controller,
            };
            let log = rollout(&cfg, setup.true_plant, &c)?;
            (log, Some((gp_v, gp_b)))
        };
        let added = log.samples.len();
        samples.extend(log.samples.iter().cloned());
        let done = index > 1 && log.fully_feasible();
        let (gp_v, gp_b) = match gps {
            Some((v, b)) => (Some(v), Some(b)),
            None => (None, None),
        };
        episodes.push(EpisodeResult {
            index,
            log,
            data_added: added,
            data_total: samples.len(),
            gp_v,
            gp_b,
        });
        if done {
            converged = true;
            break;
        }
    }
    Ok(LearningResult {
        episodes,
        converged,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        match self.points {
            0 => Vec::new(),
            1 => vec![0.5 * (self.lo + self.hi)],
            n => (0..n)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapCell {
    pub x: DVector<f64>,
    pub report: FeasibilityReport,
}

/// Classifies the CBF chance constraint at every node of the grid. The first
/// axis varies fastest.
pub fn feasibility_map(
    gp_b: &ResidualGp,
    nominal: &dyn ControlAffine,
    cbf: &Certificate,
    axes: &[GridAxis],
) -> Result<Vec<MapCell>> {
    check_dim("grid axes", nominal.state_dim(), axes.len())?;
    if axes.iter().any(|a| a.points == 0 || !(a.lo <= a.hi)) {
        return Err(Error::InvalidParameter(
            "grid axes need points and lo ≤ hi".into(),
        ));
    }
    let values: Vec<Vec<f64>> = axes.iter().map(GridAxis::values).collect();
    let total: usize = values.iter().map(Vec::len).product();
    let states: Vec<DVector<f64>> = (0..total)
        .map(|mut lin| {
            DVector::from_iterator(
                values.len(),
                values.iter().map(|v| {
                    let x = v[lin % v.len()];
                    lin /= v.len();
                    x
                }),
            )
        })
        .collect();

    let eval = |x: &DVector<f64>| -> Result<MapCell> {
        let c = build_soc_constraint(gp_b, nominal, cbf, x)?;
        Ok(MapCell {
            x: x.clone(),
            report: classify_default(&c)?,
        })
    };
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(total.max(1));
    let chunk = total.div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<Vec<MapCell>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = states
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(eval).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("map worker panicked"))
            .collect()
    });
    let mut cells = Vec::with_capacity(total);
    for p in parts {
        cells.extend(p?);
    }
    Ok(cells)
}

pub fn feasible_fraction(cells: &[MapCell]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    cells.iter().filter(|c| c.report.feasible).count() as f64 / cells.len() as f64
}
