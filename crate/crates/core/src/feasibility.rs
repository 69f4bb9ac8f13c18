//! Pointwise feasibility of a single second-order cone constraint
//! `‖Q u + r‖ ≤ w u + v`.
//!
//! With `ψ = [v w]` and `M = [r Q]ᵀ[r Q]`, the constraint is equivalent to
//! `[1 uᵀ] H [1; u] ≤ 0` together with `w u + v ≥ 0`, where `H = M - ψᵀψ`.
//! Writing `F = QᵀQ - wᵀw` (the lower right block of `H`) and `λ†` for its
//! smallest eigenvalue, the feasible set is
//!
//! * hyperbolic when `λ† < 0`, and always nonempty;
//! * elliptic when `λ† > 0`, nonempty iff `H` is not positive definite and
//!   `v - w F⁻¹ h ≥ 0` with `h = Qᵀr - wᵀv`;
//! * parabolic when `λ† = 0`, nonempty iff `H` is not positive definite and
//!   `p = v + w u₀ > 0` with `u₀` the least-squares minimizer of `‖Q u + r‖`.
//!
//! Every feasible verdict carries a control that satisfies the constraint,
//! built along the lines of the constructive arguments for each case.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{frobenius, min_eigenpair, symmetrize};

/// `‖Q u + r‖ ≤ w u + v` with `Q ∈ ℝ^{(m+1)×m}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocConstraint {
    pub q: DMatrix<f64>,
    pub r: DVector<f64>,
    /// Row vector `w`, stored as a column.
    pub w: DVector<f64>,
    pub v: f64,
}

impl SocConstraint {
    pub fn new(q: DMatrix<f64>, r: DVector<f64>, w: DVector<f64>, v: f64) -> Result<Self> {
        check_dim("constraint offset r", q.nrows(), r.len())?;
        check_dim("constraint slope w", q.ncols(), w.len())?;
        Ok(SocConstraint { q, r, w, v })
    }

    pub fn control_dim(&self) -> usize {
        self.q.ncols()
    }

    /// `‖Q u + r‖`
    pub fn lhs(&self, u: &DVector<f64>) -> f64 {
        (&self.q * u + &self.r).norm()
    }

    /// `w u + v`
    pub fn rhs(&self, u: &DVector<f64>) -> f64 {
        self.w.dot(u) + self.v
    }

    /// `w u + v - ‖Q u + r‖`, nonnegative iff `u` is feasible.
    pub fn margin(&self, u: &DVector<f64>) -> f64 {
        self.rhs(u) - self.lhs(u)
    }

    /// `[r Q]`
    pub fn stacked(&self) -> DMatrix<f64> {
        let m = self.control_dim();
        let mut rq = DMatrix::zeros(self.r.len(), m + 1);
        rq.set_column(0, &self.r);
        rq.view_mut((0, 1), (self.r.len(), m)).copy_from(&self.q);
        rq
    }

    /// `ψ = [v w]` as a column.
    pub fn psi(&self) -> DVector<f64> {
        let mut psi = DVector::zeros(self.control_dim() + 1);
        psi[0] = self.v;
        psi.rows_mut(1, self.control_dim()).copy_from(&self.w);
        psi
    }

    /// `F = QᵀQ - wᵀw`
    pub fn f_matrix(&self) -> DMatrix<f64> {
        symmetrize(&(self.q.transpose() * &self.q - &self.w * self.w.transpose()))
    }

    /// `h = Qᵀr - wᵀv`
    pub fn h_vector(&self) -> DVector<f64> {
        self.q.transpose() * &self.r - &self.w * self.v
    }
}

/// `H = [r Q]ᵀ[r Q] - ψᵀψ`, whose quadratic form in `[1; u]` equals
/// `‖Q u + r‖² - (w u + v)²`.
pub fn h_matrix(c: &SocConstraint) -> DMatrix<f64> {
    let rq = c.stacked();
    let psi = c.psi();
    symmetrize(&(rq.transpose() * rq - &psi * psi.transpose()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NecessaryCondition {
    pub holds: bool,
    /// `ψ C⁻¹ ψᵀ - β²`
    pub value: f64,
}

/// Tests `ψ C⁻¹ ψᵀ ≥ β²` for the constraint obtained from a prediction with
/// variance Gram `c_b` and confidence multiplier `beta`.
pub fn necessary_condition(
    c: &SocConstraint,
    beta: f64,
    c_b: &DMatrix<f64>,
) -> Result<NecessaryCondition> {
    let k = c.control_dim() + 1;
    check_dim("variance Gram rows", k, c_b.nrows())?;
    check_dim("variance Gram columns", k, c_b.ncols())?;
    let chol = symmetrize(c_b)
        .cholesky()
        .ok_or(Error::Singular("variance Gram is not positive definite"))?;
    let psi = c.psi();
    let value = psi.dot(&chol.solve(&psi)) - beta * beta;
    Ok(NecessaryCondition {
        holds: value >= 0.0,
        value,
    })
}

/// Sign-equivalent form of the necessary condition using only the
/// constraint: `ψ M⁻¹ ψᵀ - 1` with `M = [r Q]ᵀ[r Q] = β² C`. When `M` is
/// singular `H` cannot be positive definite and the value is `+∞`.
fn normalized_necessary(c: &SocConstraint) -> f64 {
    let rq = c.stacked();
    let m = symmetrize(&(rq.transpose() * &rq));
    let scale = frobenius(&m);
    if scale == 0.0 {
        return f64::INFINITY;
    }
    let Some(chol) = m.clone().cholesky() else {
        return f64::INFINITY;
    };
    let psi = c.psi();
    psi.dot(&chol.solve(&psi)) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    Hyperbolic,
    Elliptic,
    Parabolic,
}

impl Geometry {
    pub fn as_str(&self) -> &'static str {
        match self {
            Geometry::Hyperbolic => "hyperbolic",
            Geometry::Elliptic => "elliptic",
            Geometry::Parabolic => "parabolic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeasibilityCase {
    Hyperbolic,
    Elliptic,
    Parabolic,
    Infeasible,
}

impl FeasibilityCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeasibilityCase::Hyperbolic => "hyperbolic",
            FeasibilityCase::Elliptic => "elliptic",
            FeasibilityCase::Parabolic => "parabolic",
            FeasibilityCase::Infeasible => "infeasible",
        }
    }
}

impl std::fmt::Display for FeasibilityCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeasibilityCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperbolic" => Ok(FeasibilityCase::Hyperbolic),
            "elliptic" => Ok(FeasibilityCase::Elliptic),
            "parabolic" => Ok(FeasibilityCase::Parabolic),
            "infeasible" => Ok(FeasibilityCase::Infeasible),
            other => Err(Error::InvalidParameter(format!(
                "unknown case label {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub geometry: Geometry,
    pub feasible: bool,
    /// Smallest eigenvalue of `F`.
    pub lambda_dagger: f64,
    /// Unit eigenvector of `F` for `λ†`.
    pub e_dagger: DVector<f64>,
    pub eig_tol: f64,
    pub necessary_holds: bool,
    /// `ψ (β²C)⁻¹ ψᵀ - 1`, same sign as `ψ C⁻¹ ψᵀ - β²`.
    pub necessary_value: f64,
    /// `h = Qᵀr - wᵀv`
    pub h: DVector<f64>,
    /// Least-squares point (parabolic).
    pub u0: Option<DVector<f64>>,
    /// Minimizer of the quadratic form (elliptic).
    pub u1: Option<DVector<f64>>,
    /// `v + w u₁` (elliptic) or `p = v + w u₀` (parabolic).
    pub case_value: Option<f64>,
    /// Feasible control when one was found.
    pub certificate: Option<DVector<f64>>,
    /// Set when the verdict is feasible but no witness was found before the
    /// escalation limit.
    pub certificate_missing: bool,
}

impl FeasibilityReport {
    pub fn case(&self) -> FeasibilityCase {
        if !self.feasible {
            return FeasibilityCase::Infeasible;
        }
        match self.geometry {
            Geometry::Hyperbolic => FeasibilityCase::Hyperbolic,
            Geometry::Elliptic => FeasibilityCase::Elliptic,
            Geometry::Parabolic => FeasibilityCase::Parabolic,
        }
    }
}

/// Relative eigenvalue tolerance `10⁻⁹ (‖QᵀQ‖_F + ‖w‖²)`.
pub fn default_eig_tol(c: &SocConstraint) -> f64 {
    let qtq = c.q.transpose() * &c.q;
    let scale = frobenius(&qtq) + c.w.norm_squared();
    (1e-9 * scale).max(f64::MIN_POSITIVE)
}

const ALPHA_LIMIT: f64 = 1e12;

/// Smallest `α ∈ {1, 2, 4, …} ≤ 10¹²` with `base + α dir` feasible.
fn escalate(c: &SocConstraint, base: &DVector<f64>, dir: &DVector<f64>) -> Option<DVector<f64>> {
    let mut alpha = 1.0;
    while alpha <= ALPHA_LIMIT {
        let u = base + dir * alpha;
        if c.margin(&u) >= 0.0 {
            return Some(u);
        }
        alpha *= 2.0;
    }
    None
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Classifies the constraint into the three geometries and decides
/// feasibility exactly (up to `eig_tol` on `λ†`).
pub fn classify(c: &SocConstraint, eig_tol: f64) -> Result<FeasibilityReport> {
    if !(eig_tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eig_tol must be positive, got {eig_tol}"
        )));
    }
    let m = c.control_dim();
    if m == 0 {
        return Err(Error::InvalidParameter("constraint has no control".into()));
    }
    let f = c.f_matrix();
    let (lambda, e) = min_eigenpair(&f);
    let h = c.h_vector();
    let necessary_value = normalized_necessary(c);
    let necessary_holds = necessary_value >= 0.0;
    let direction = &e * signum0(c.w.dot(&e));

    let mut report = FeasibilityReport {
        geometry: Geometry::Parabolic,
        feasible: false,
        lambda_dagger: lambda,
        e_dagger: e.clone(),
        eig_tol,
        necessary_holds,
        necessary_value,
        h: h.clone(),
        u0: None,
        u1: None,
        case_value: None,
        certificate: None,
        certificate_missing: false,
    };

    if lambda < -eig_tol {
        report.geometry = Geometry::Hyperbolic;
        report.feasible = true;
        report.certificate = escalate(c, &DVector::zeros(m), &direction);
    } else if lambda > eig_tol {
        report.geometry = Geometry::Elliptic;
        let u1 = match f.clone().cholesky() {
            Some(ch) => -ch.solve(&h),
            None => -f
                .clone()
                .lu()
                .solve(&h)
                .ok_or(Error::Singular("F in the elliptic case"))?,
        };
        let value = c.rhs(&u1);
        report.feasible = necessary_holds && value >= 0.0;
        report.case_value = Some(value);
        if report.feasible {
            report.certificate = Some(u1.clone());
        }
        report.u1 = Some(u1);
    } else {
        report.geometry = Geometry::Parabolic;
        let qtq = c.q.transpose() * &c.q;
        let qtr = c.q.transpose() * &c.r;
        let svd = qtq.svd(true, true);
        let eps = (svd.singular_values.max() * 1e-12).max(f64::MIN_POSITIVE);
        let u0 = -svd
            .solve(&qtr, eps)
            .map_err(|_| Error::Singular("QᵀQ in the parabolic case"))?;
        let p = c.rhs(&u0);
        report.feasible = necessary_holds && p > 0.0;
        report.case_value = Some(p);
        if report.feasible {
            report.certificate = if c.margin(&u0) >= 0.0 {
                Some(u0.clone())
            } else {
                escalate(c, &u0, &direction)
            };
        }
        report.u0 = Some(u0);
    }
    report.certificate_missing = report.feasible && report.certificate.is_none();
    Ok(report)
}

/// [`classify`] with [`default_eig_tol`].
pub fn classify_default(c: &SocConstraint) -> Result<FeasibilityReport> {
    classify(c, default_eig_tol(c))
}

/// Best point found by [`brute_force_max_margin`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub u: DVector<f64>,
    pub margin: f64,
}

const MAX_ROUNDS: usize = 400;

/// Maximizes the (concave) margin `w u + v - ‖Q u + r‖` over the box
/// `[-half_width, half_width]^m` with an adaptive lattice of
/// `2·points + 1` nodes per axis. Stops early once a node with
/// nonnegative margin is found when `stop_at_feasible` is set.
pub fn brute_force_max_margin(
    c: &SocConstraint,
    half_width: f64,
    points: usize,
    stop_at_feasible: bool,
) -> GridSearch {
    let m = c.control_dim();
    let k = points.max(1) as i64;
    let side = (2 * k + 1) as usize;
    let total = side.pow(m as u32);
    let mut center = DVector::zeros(m);
    let mut h = half_width / k as f64;
    let mut best = GridSearch {
        u: center.clone(),
        margin: c.margin(&center),
    };
    let floor = half_width * 1e-13;
    let mut u = DVector::zeros(m);
    let mut idx = vec![0i64; m];
    let coarse = half_width / k as f64;
    let mut rounds = 0;
    while h > floor && rounds < MAX_ROUNDS {
        rounds += 1;
        let mut best_here = best.clone();
        let mut best_offset = vec![0i64; m];
        for lin in 0..total {
            let mut rem = lin;
            for j in 0..m {
                idx[j] = (rem % side) as i64 - k;
                rem /= side;
                u[j] = (center[j] + idx[j] as f64 * h).clamp(-half_width, half_width);
            }
            let g = c.margin(&u);
            if g > best_here.margin {
                best_here = GridSearch {
                    u: u.clone(),
                    margin: g,
                };
                best_offset.copy_from_slice(&idx);
            }
        }
        best = best_here;
        if stop_at_feasible && best.margin >= 0.0 {
            return best;
        }
        center = best.u.clone();
        // expand along a ray of improvement, shrink once the best node is inside
        let on_edge = best_offset.iter().any(|o| o.abs() == k);
        h = if on_edge {
            (h * 2.0).min(coarse)
        } else {
            h / k as f64
        };
    }
    best
}

/// True iff some lattice node in the box satisfies the constraint.
pub fn brute_force_feasible(c: &SocConstraint, half_width: f64, points: usize) -> bool {
    brute_force_max_margin(c, half_width, points, true).margin >= 0.0
}
