//! Min-norm CLF/CBF controllers as second-order cone programs.
//!
//! All variants share one program layout over `[ũ, d, t]`, where
//! `ũ = u / s` is the control divided by the configured `control_scale`,
//! `d` is the CLF slack (absent for the CLF-only controllers) and `t` is the
//! epigraph variable of `‖ũ‖² + p d²`.
//!
//! A certificate rate is modelled as `ḣ(x, u) ∈ [μ(u) - ‖Q u + r‖, μ(u) + ‖Q u + r‖]`
//! with `μ(u) = â + b̂ u`. Without a GP the uncertainty term vanishes and the
//! constraints become linear.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{
    self, quadratic_objective_to_cone, SocCone, SocProgram, SolveStatus, SolverSettings,
};
use crate::dynamics::{lie_derivatives, Certificate, ControlAffine};
use crate::error::{check_dim, Error, Result};
use crate::feasibility::{classify_default, FeasibilityCase, SocConstraint};
use crate::gp::ResidualGp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    ClfQp,
    CbfClfQpNominal,
    CbfClfQpOracle,
    GpClfSocp,
    GpCbfClfSocp,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::ClfQp,
        ControllerKind::CbfClfQpNominal,
        ControllerKind::CbfClfQpOracle,
        ControllerKind::GpClfSocp,
        ControllerKind::GpCbfClfSocp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::ClfQp => "clf-qp",
            ControllerKind::CbfClfQpNominal => "cbf-clf-qp-nominal",
            ControllerKind::CbfClfQpOracle => "cbf-clf-qp-oracle",
            ControllerKind::GpClfSocp => "gp-clf-socp",
            ControllerKind::GpCbfClfSocp => "gp-cbf-clf-socp",
        }
    }

    pub fn uses_gp(&self) -> bool {
        matches!(
            self,
            ControllerKind::GpClfSocp | ControllerKind::GpCbfClfSocp
        )
    }

    pub fn has_cbf(&self) -> bool {
        !matches!(self, ControllerKind::ClfQp | ControllerKind::GpClfSocp)
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown controller {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSettings {
    /// Weight `p` of the CLF slack.
    pub slack_weight: f64,
    /// The program's decision variable is `u / control_scale`.
    pub control_scale: f64,
    pub solver: SolverSettings,
    /// Run the exact feasibility classifier on the hard constraint before
    /// solving, and skip the solve when it is infeasible.
    pub precheck: bool,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        ControllerSettings {
            slack_weight: 100.0,
            control_scale: 1.0,
            solver: SolverSettings::default(),
            precheck: true,
        }
    }
}

impl ControllerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.slack_weight > 0.0 && self.slack_weight.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "slack weight must be positive, got {}",
                self.slack_weight
            )));
        }
        if !(self.control_scale > 0.0 && self.control_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "control scale must be positive, got {}",
                self.control_scale
            )));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::InvalidParameter("invalid solver settings".into()));
        }
        Ok(())
    }
}

/// Affine mean and cone-shaped uncertainty of a certificate rate, plus the
/// decay term `λ V(x)` or `γ(B(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    /// `L_f̃ h + b₁`
    pub drift: f64,
    /// `L_g̃ h + b_{2:m+1}`
    pub actuation: DVector<f64>,
    /// `β G₂..ₘ₊₁`
    pub q: DMatrix<f64>,
    /// `β G₁`
    pub r: DVector<f64>,
    pub decay: f64,
}

impl RateModel {
    /// Exact rate of `plant`, no uncertainty.
    pub fn exact(plant: &dyn ControlAffine, cert: &Certificate, x: &DVector<f64>) -> Result<Self> {
        let lie = lie_derivatives(plant, cert, x)?;
        let m = plant.control_dim();
        Ok(RateModel {
            drift: lie.lf,
            actuation: lie.lg,
            q: DMatrix::zeros(m + 1, m),
            r: DVector::zeros(m + 1),
            decay: cert.decay_term(x),
        })
    }

    /// Nominal rate corrected by a residual GP.
    pub fn learned(
        gp: &ResidualGp,
        nominal: &dyn ControlAffine,
        cert: &Certificate,
        x: &DVector<f64>,
    ) -> Result<Self> {
        let m = nominal.control_dim();
        check_dim("GP control dimension", m, gp.control_dim())?;
        check_dim("GP state dimension", nominal.state_dim(), gp.state_dim())?;
        let lie = lie_derivatives(nominal, cert, x)?;
        let pred = gp.predict_affine(x)?;
        let scaled = &pred.g * gp.beta();
        Ok(RateModel {
            drift: lie.lf + pred.b[0],
            actuation: lie.lg + pred.b.rows(1, m),
            q: scaled.columns(1, m).into_owned(),
            r: scaled.column(0).into_owned(),
            decay: cert.decay_term(x),
        })
    }

    pub fn control_dim(&self) -> usize {
        self.actuation.len()
    }

    pub fn mean(&self, u: &DVector<f64>) -> f64 {
        self.drift + self.actuation.dot(u)
    }

    /// `‖Q u + r‖`, i.e. `β σ(x, u)`.
    pub fn spread(&self, u: &DVector<f64>) -> f64 {
        (&self.q * u + &self.r).norm()
    }

    /// Barrier form `mean - spread + decay ≥ 0` as `‖Q u + r‖ ≤ w u + v`.
    pub fn barrier_constraint(&self) -> SocConstraint {
        SocConstraint {
            q: self.q.clone(),
            r: self.r.clone(),
            w: self.actuation.clone(),
            v: self.drift + self.decay,
        }
    }

    /// Lyapunov form `mean + spread + decay ≤ 0` as `‖Q u + r‖ ≤ w u + v`.
    pub fn lyapunov_constraint(&self) -> SocConstraint {
        SocConstraint {
            q: self.q.clone(),
            r: self.r.clone(),
            w: -&self.actuation,
            v: -(self.drift + self.decay),
        }
    }
}

/// Data of one controller evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStep {
    pub u: DVector<f64>,
    /// CLF slack, zero for the CLF-only controllers.
    pub d: f64,
    pub status: SolveStatus,
    /// Classification of the hard constraint, when the precheck ran.
    pub case: Option<FeasibilityCase>,
    /// `d - (μ_V + βσ_V + λV)` at the returned control.
    pub clf_margin: f64,
    /// `μ_B - βσ_B + γ(B)` at the returned control; `NaN` without a CBF.
    pub cbf_margin: f64,
    pub solve_time: Duration,
    pub iterations: usize,
    pub program: SocProgram,
}

impl ControlStep {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Builds the common min-norm program. `clf_soft` adds the slack `d`.
pub fn build_program(
    clf: &RateModel,
    cbf: Option<&RateModel>,
    clf_soft: bool,
    settings: &ControllerSettings,
) -> Result<SocProgram> {
    settings.validate()?;
    let m = clf.control_dim();
    if let Some(b) = cbf {
        check_dim("barrier control dimension", m, b.control_dim())?;
    }
    let s = settings.control_scale;
    let n_base = if clf_soft { m + 1 } else { m };
    let mut weights: Vec<(f64, usize)> = (0..m).map(|i| (1.0, i)).collect();
    if clf_soft {
        weights.push((settings.slack_weight, m));
    }
    let epi = quadratic_objective_to_cone(&weights, n_base)?;
    let nv = n_base + 1;
    let mut cones = vec![epi.cone];

    let to_cone = |c: &SocConstraint, slack: bool| -> SocCone {
        let rows = c.r.len();
        let mut e = DVector::zeros(nv);
        e.rows_mut(0, m).copy_from(&(&c.w * s));
        if slack {
            e[m] = 1.0;
        }
        let exact = c.q.iter().chain(c.r.iter()).all(|v| *v == 0.0);
        if exact {
            return SocCone::linear(e, c.v);
        }
        let mut a = DMatrix::zeros(rows, nv);
        a.view_mut((0, 0), (rows, m)).copy_from(&(&c.q * s));
        SocCone {
            a,
            b: c.r.clone(),
            e,
            d: c.v,
        }
    };
    cones.push(to_cone(&clf.lyapunov_constraint(), clf_soft));
    if let Some(b) = cbf {
        cones.push(to_cone(&b.barrier_constraint(), false));
    }
    SocProgram::new(epi.objective, cones)
}

fn run_step(
    clf: &RateModel,
    cbf: Option<&RateModel>,
    clf_soft: bool,
    settings: &ControllerSettings,
) -> Result<ControlStep> {
    let start = Instant::now();
    let m = clf.control_dim();
    let program = build_program(clf, cbf, clf_soft, settings)?;
    let hard = match cbf {
        Some(b) => b.barrier_constraint(),
        None => clf.lyapunov_constraint(),
    };
    let exact = hard.q.iter().chain(hard.r.iter()).all(|v| *v == 0.0);
    let case = if settings.precheck && !exact {
        Some(classify_default(&hard)?.case())
    } else {
        None
    };
    // a linear constraint w u + v ≥ 0 fails only when w = 0 and v < 0
    let linear_infeasible = exact && hard.w.iter().all(|v| *v == 0.0) && hard.v < 0.0;
    let margins = |u: &DVector<f64>, d: f64| {
        let clf_margin = d - (clf.mean(u) + clf.spread(u) + clf.decay);
        let cbf_margin = cbf.map_or(f64::NAN, |b| b.mean(u) - b.spread(u) + b.decay);
        (clf_margin, cbf_margin)
    };
    if case == Some(FeasibilityCase::Infeasible) || linear_infeasible {
        let u = DVector::zeros(m);
        let (clf_margin, cbf_margin) = margins(&u, 0.0);
        return Ok(ControlStep {
            u,
            d: 0.0,
            status: SolveStatus::Infeasible,
            case,
            clf_margin,
            cbf_margin,
            solve_time: start.elapsed(),
            iterations: 0,
            program,
        });
    }
    let res = conic::solve(&program, &settings.solver)?;
    let u = res.x.rows(0, m) * settings.control_scale;
    let d = if clf_soft { res.x[m] } else { 0.0 };
    let (clf_margin, cbf_margin) = margins(&u, d);
    Ok(ControlStep {
        u,
        d,
        status: res.status,
        case,
        clf_margin,
        cbf_margin,
        solve_time: start.elapsed(),
        iterations: res.iterations,
        program,
    })
}

/// `min ‖u‖²` s.t. `L_f V + L_g V u + λ V ≤ 0` on `plant`.
pub fn clf_qp_step(
    plant: &dyn ControlAffine,
    clf: &Certificate,
    x: &DVector<f64>,
    settings: &ControllerSettings,
) -> Result<ControlStep> {
    run_step(&RateModel::exact(plant, clf, x)?, None, false, settings)
}

/// `min ‖u‖² + p d²` s.t. the relaxed CLF and the hard CBF constraint on
/// `plant` (the nominal model for the baseline, the true plant for the
/// oracle).
pub fn cbf_clf_qp_step(
    plant: &dyn ControlAffine,
    clf: &Certificate,
    cbf: &Certificate,
    x: &DVector<f64>,
    settings: &ControllerSettings,
) -> Result<ControlStep> {
    let v = RateModel::exact(plant, clf, x)?;
    let b = RateModel::exact(plant, cbf, x)?;
    run_step(&v, Some(&b), true, settings)
}

/// `min ‖u‖²` s.t. `Ṽ̇ + μ_V + βσ_V + λV ≤ 0`.
pub fn gp_clf_socp_step(
    gp_v: &ResidualGp,
    nominal: &dyn ControlAffine,
    clf: &Certificate,
    x: &DVector<f64>,
    settings: &ControllerSettings,
) -> Result<ControlStep> {
    run_step(
        &RateModel::learned(gp_v, nominal, clf, x)?,
        None,
        false,
        settings,
    )
}

/// `min ‖u‖² + p d²` s.t. `Ṽ̇ + μ_V + βσ_V + λV ≤ d` and
/// `B̃̇ + μ_B - βσ_B + γ(B) ≥ 0`.
#[allow(clippy::too_many_arguments)]
pub fn gp_cbf_clf_socp_step(
    gp_v: &ResidualGp,
    gp_b: &ResidualGp,
    nominal: &dyn ControlAffine,
    clf: &Certificate,
    cbf: &Certificate,
    x: &DVector<f64>,
    settings: &ControllerSettings,
) -> Result<ControlStep> {
    let v = RateModel::learned(gp_v, nominal, clf, x)?;
    let b = RateModel::learned(gp_b, nominal, cbf, x)?;
    run_step(&v, Some(&b), true, settings)
}

/// Standard-form CBF chance constraint `‖Q u + r‖ ≤ w u + v` at `x`.
pub fn build_soc_constraint(
    gp_b: &ResidualGp,
    nominal: &dyn ControlAffine,
    cbf: &Certificate,
    x: &DVector<f64>,
) -> Result<SocConstraint> {
    Ok(RateModel::learned(gp_b, nominal, cbf, x)?.barrier_constraint())
}

/// A controller variant with everything it needs to be evaluated.
#[derive(Clone, Copy)]
pub struct Controller<'a> {
    pub kind: ControllerKind,
    pub nominal: &'a dyn ControlAffine,
    /// True plant, used only by the oracle.
    pub oracle: Option<&'a dyn ControlAffine>,
    pub clf: &'a Certificate,
    pub cbf: &'a Certificate,
    pub gp_v: Option<&'a ResidualGp>,
    pub gp_b: Option<&'a ResidualGp>,
    pub settings: ControllerSettings,
}

impl std::fmt::Debug for Controller<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("kind", &self.kind)
            .field("settings", &self.settings)
            .finish_non_exhaustive()
    }
}

impl<'a> Controller<'a> {
    pub fn step(&self, x: &DVector<f64>) -> Result<ControlStep> {
        let missing = |what: &str| Error::InvalidParameter(format!("{} needs {what}", self.kind));
        match self.kind {
            ControllerKind::ClfQp => clf_qp_step(self.nominal, self.clf, x, &self.settings),
            ControllerKind::CbfClfQpNominal => {
                cbf_clf_qp_step(self.nominal, self.clf, self.cbf, x, &self.settings)
            }
            ControllerKind::CbfClfQpOracle => {
                let plant = self.oracle.ok_or_else(|| missing("the true plant"))?;
                cbf_clf_qp_step(plant, self.clf, self.cbf, x, &self.settings)
            }
            ControllerKind::GpClfSocp => {
                let gp_v = self.gp_v.ok_or_else(|| missing("a CLF residual GP"))?;
                gp_clf_socp_step(gp_v, self.nominal, self.clf, x, &self.settings)
            }
            ControllerKind::GpCbfClfSocp => {
                let gp_v = self.gp_v.ok_or_else(|| missing("a CLF residual GP"))?;
                let gp_b = self.gp_b.ok_or_else(|| missing("a CBF residual GP"))?;
                gp_cbf_clf_socp_step(
                    gp_v,
                    gp_b,
                    self.nominal,
                    self.clf,
                    self.cbf,
                    x,
                    &self.settings,
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{AccParams, AccPlant};
    use crate::gp::ResidualDataset;
    use crate::kernels::{AdpKernel, BaseKernel};
    use nalgebra::dvector;

    fn acc() -> (AccPlant, AccPlant, Certificate, Certificate) {
        (
            AccPlant::new(AccParams::true_plant()).unwrap(),
            AccPlant::new(AccParams::nominal_model()).unwrap(),
            Certificate::acc_clf(24.0, 1.0).unwrap(),
            Certificate::acc_cbf(1.8, 1.0).unwrap(),
        )
    }

    fn settings() -> ControllerSettings {
        ControllerSettings {
            control_scale: 1650.0,
            ..ControllerSettings::default()
        }
    }

    fn prior_gp(beta: f64) -> ResidualGp {
        let k = AdpKernel::new(vec![
            BaseKernel::squared_exponential(1e-2, vec![5.0, 50.0]).unwrap(),
            BaseKernel::squared_exponential(1e-6, vec![5.0, 50.0]).unwrap(),
        ])
        .unwrap();
        ResidualGp::fit(ResidualDataset::empty(2, 1, 0.01).unwrap(), k, beta).unwrap()
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(k.as_str().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("qp".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn at_target_far_from_obstacle_is_zero() {
        // v0 = v_d makes the drift rate of B zero, F_r makes V̇ nonzero, so
        // use a frictionless plant
        let mut p = AccParams::nominal_model();
        p.f0 = 0.0;
        p.f1 = 0.0;
        p.f2 = 0.0;
        let plant = AccPlant::new(p).unwrap();
        let (_, _, clf, cbf) = acc();
        let x = dvector![24.0, 1000.0];
        let step = cbf_clf_qp_step(&plant, &clf, &cbf, &x, &settings()).unwrap();
        assert!(step.is_optimal());
        // ũ = u / 1650 is accurate to about √tol
        assert!(step.u[0].abs() / 1650.0 < 1e-3, "{}", step.u[0]);
        assert!(step.d.abs() < 1e-3);
        let step = clf_qp_step(&plant, &clf, &x, &settings()).unwrap();
        assert!(step.is_optimal());
        assert!(step.u[0].abs() / 1650.0 < 1e-3);
    }

    #[test]
    fn clf_qp_matches_closed_form() {
        let (_, nominal, clf, _) = acc();
        let x = dvector![20.0, 100.0];
        let lie = lie_derivatives(&nominal, &clf, &x).unwrap();
        // L_f + L_g u + λV ≤ 0 with L_g < 0: u ≥ -(L_f + λV)/L_g
        let expect = (-(lie.lf + clf.decay_term(&x)) / lie.lg[0]).max(0.0);
        let step = clf_qp_step(&nominal, &clf, &x, &settings()).unwrap();
        assert!(step.is_optimal());
        assert!(
            (step.u[0] - expect).abs() < 1e-4 * expect.abs().max(1.0),
            "{} {}",
            step.u[0],
            expect
        );
    }

    #[test]
    fn active_cbf_matches_kkt() {
        let (_, nominal, clf, cbf) = acc();
        // close to the front car and fast: CBF is active
        let x = dvector![22.0, 42.0];
        let b = RateModel::exact(&nominal, &cbf, &x).unwrap();
        let bound = -(b.drift + b.decay) / b.actuation[0];
        let step = cbf_clf_qp_step(&nominal, &clf, &cbf, &x, &settings()).unwrap();
        assert!(step.is_optimal());
        assert!(step.cbf_margin >= -1e-6);
        // L_gB < 0, so the CBF caps u from above
        assert!(step.u[0] <= bound + 1e-3);
        assert!((step.u[0] - bound).abs() < 1e-3 || step.u[0] < bound);
    }

    #[test]
    fn zero_beta_collapses_to_linear_constraint() {
        let (_, nominal, _, cbf) = acc();
        let gp = prior_gp(0.0);
        let x = dvector![20.0, 60.0];
        let c = build_soc_constraint(&gp, &nominal, &cbf, &x).unwrap();
        assert!(c.q.iter().chain(c.r.iter()).all(|v| *v == 0.0));
        let lie = lie_derivatives(&nominal, &cbf, &x).unwrap();
        assert_eq!(c.w, lie.lg);
        assert!((c.v - (lie.lf + cbf.decay_term(&x))).abs() < 1e-14);
    }

    #[test]
    fn prior_gp_constraint_uses_prior_root() {
        let (_, nominal, _, cbf) = acc();
        let gp = prior_gp(2.0);
        let x = dvector![20.0, 60.0];
        let c = build_soc_constraint(&gp, &nominal, &cbf, &x).unwrap();
        assert!((c.r[0] - 2.0 * 0.1).abs() < 1e-10);
        assert!((c.q[(1, 0)] - 2.0 * 1e-3).abs() < 1e-12);
        assert!(c.q[(0, 0)].abs() < 1e-12 && c.r[1].abs() < 1e-12);
    }

    #[test]
    fn near_prior_gp_is_infeasible_when_braking_is_needed() {
        let (_, nominal, clf, cbf) = acc();
        let (gp_v, gp_b) = (prior_gp(2.0), prior_gp(2.0));
        let x = dvector![22.0, 40.0];
        let step =
            gp_cbf_clf_socp_step(&gp_v, &gp_b, &nominal, &clf, &cbf, &x, &settings()).unwrap();
        assert_eq!(step.status, SolveStatus::Infeasible);
        assert_eq!(step.case, Some(FeasibilityCase::Infeasible));
        let no_check = ControllerSettings {
            precheck: false,
            ..settings()
        };
        let step = gp_cbf_clf_socp_step(&gp_v, &gp_b, &nominal, &clf, &cbf, &x, &no_check).unwrap();
        assert_eq!(step.status, SolveStatus::Infeasible);
    }

    #[test]
    fn slack_weight_ordering() {
        let (_, nominal, clf, cbf) = acc();
        let x = dvector![21.0, 45.0];
        let mut last = f64::INFINITY;
        for p in [1.0, 10.0, 100.0] {
            let s = ControllerSettings {
                slack_weight: p,
                ..settings()
            };
            let step = cbf_clf_qp_step(&nominal, &clf, &cbf, &x, &s).unwrap();
            assert!(step.is_optimal());
            assert!(step.d <= last + 1e-6, "p = {p}: {} > {last}", step.d);
            last = step.d;
        }
    }

    #[test]
    fn controller_reports_missing_parts() {
        let (_, nominal, clf, cbf) = acc();
        let c = Controller {
            kind: ControllerKind::GpCbfClfSocp,
            nominal: &nominal,
            oracle: None,
            clf: &clf,
            cbf: &cbf,
            gp_v: None,
            gp_b: None,
            settings: settings(),
        };
        assert!(c.step(&dvector![20.0, 100.0]).is_err());
        let c = Controller {
            kind: ControllerKind::CbfClfQpOracle,
            ..c
        };
        assert!(c.step(&dvector![20.0, 100.0]).is_err());
    }
}
