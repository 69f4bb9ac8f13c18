//! Control-affine plants `ẋ = f(x) + g(x) u`, CLF/CBF certificates and the
//! residuals between true and nominal certificate derivatives.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A control-affine vector field pair `(f, g)`.
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// `f(x)`
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `g(x)`, an `n × m` matrix.
    fn actuation(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `f(x) + g(x) u`
    fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.actuation(x) * u
    }
}

type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatrixField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type ScalarField = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Plant defined by closures, mostly useful for tests and custom systems.
#[derive(Clone)]
pub struct FnPlant {
    n: usize,
    m: usize,
    f: VectorField,
    g: MatrixField,
}

impl FnPlant {
    pub fn new(
        n: usize,
        m: usize,
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        g: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        FnPlant {
            n,
            m,
            f: Arc::new(f),
            g: Arc::new(g),
        }
    }
}

impl fmt::Debug for FnPlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPlant")
            .field("n", &self.n)
            .field("m", &self.m)
            .finish_non_exhaustive()
    }
}

impl ControlAffine for FnPlant {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
    fn actuation(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.g)(x)
    }
}

/// Adaptive cruise control parameters. State is `x = [v, z]` with `v` the
/// ego velocity and `z` the gap to the front car; `u` is the wheel force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccParams {
    /// kg
    pub mass: f64,
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
    /// Front-car speed, m/s.
    pub v0: f64,
    /// Desired speed, m/s.
    pub v_desired: f64,
    /// Lookahead time, s.
    pub time_headway: f64,
}

impl AccParams {
    pub fn true_plant() -> Self {
        AccParams {
            mass: 3300.0,
            f0: 0.2,
            f1: 10.0,
            f2: 0.5,
            ..Self::nominal_model()
        }
    }

    pub fn nominal_model() -> Self {
        AccParams {
            mass: 1650.0,
            f0: 0.1,
            f1: 5.0,
            f2: 0.25,
            v0: 14.0,
            v_desired: 24.0,
            time_headway: 1.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mass must be positive, got {}",
                self.mass
            )));
        }
        if !(self.time_headway > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lookahead time must be positive, got {}",
                self.time_headway
            )));
        }
        let finite = [self.f0, self.f1, self.f2, self.v0, self.v_desired];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite ACC parameter".into()));
        }
        Ok(())
    }

    /// Rolling resistance `F_r(v) = f0 + f1 v + f2 v²`.
    pub fn rolling_resistance(&self, v: f64) -> f64 {
        self.f0 + self.f1 * v + self.f2 * v * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccPlant {
    pub params: AccParams,
}

impl AccPlant {
    pub fn new(params: AccParams) -> Result<Self> {
        params.validate()?;
        Ok(AccPlant { params })
    }
}

impl ControlAffine for AccPlant {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let v = x[0];
        DVector::from_column_slice(&[-p.rolling_resistance(v) / p.mass, p.v0 - v])
    }
    fn actuation(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[1.0 / self.params.mass, 0.0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertificateKind {
    Clf,
    Cbf,
}

/// A CLF `V` (with exponential rate λ) or a CBF `B` (with linear class-K
/// function `γ(s) = γ₀ s`).
#[derive(Clone)]
pub struct Certificate {
    kind: CertificateKind,
    rate: f64,
    value: ScalarField,
    gradient: VectorField,
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Certificate")
            .field("kind", &self.kind)
            .field("rate", &self.rate)
            .finish_non_exhaustive()
    }
}

impl Certificate {
    pub fn new(
        kind: CertificateKind,
        rate: f64,
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "certificate rate must be positive, got {rate}"
            )));
        }
        Ok(Certificate {
            kind,
            rate,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        })
    }

    /// `V(x) = (v - v_d)²` on the ACC state.
    pub fn acc_clf(v_desired: f64, rate: f64) -> Result<Self> {
        Certificate::new(
            CertificateKind::Clf,
            rate,
            move |x| (x[0] - v_desired).powi(2),
            move |x| DVector::from_column_slice(&[2.0 * (x[0] - v_desired), 0.0]),
        )
    }

    /// `B(x) = z - T_h v` on the ACC state.
    pub fn acc_cbf(time_headway: f64, rate: f64) -> Result<Self> {
        Certificate::new(
            CertificateKind::Cbf,
            rate,
            move |x| x[1] - time_headway * x[0],
            move |x| {
                let mut g = DVector::zeros(x.len());
                g[0] = -time_headway;
                g[1] = 1.0;
                g
            },
        )
    }

    pub fn kind(&self) -> CertificateKind {
        self.kind
    }

    /// λ for a CLF, γ₀ for a CBF.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }

    /// `λ V(x)` for a CLF, `γ(B(x))` for a CBF.
    pub fn decay_term(&self, x: &DVector<f64>) -> f64 {
        self.rate * self.value(x)
    }
}

/// `(L_f h(x), L_g h(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LieDerivatives {
    pub lf: f64,
    pub lg: DVector<f64>,
}

impl LieDerivatives {
    /// `L_f + L_g u`
    pub fn rate(&self, u: &DVector<f64>) -> f64 {
        self.lf + self.lg.dot(u)
    }
}

pub fn lie_derivatives(
    plant: &dyn ControlAffine,
    cert: &Certificate,
    x: &DVector<f64>,
) -> Result<LieDerivatives> {
    check_dim("state", plant.state_dim(), x.len())?;
    let grad = cert.gradient(x);
    check_dim("certificate gradient", plant.state_dim(), grad.len())?;
    let lf = grad.dot(&plant.drift(x));
    let lg = plant.actuation(x).transpose() * grad;
    Ok(LieDerivatives { lf, lg })
}

/// `ḣ(x, u) = L_f h(x) + L_g h(x) u` under `plant`.
pub fn certificate_rate(
    plant: &dyn ControlAffine,
    cert: &Certificate,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    check_dim("control", plant.control_dim(), u.len())?;
    Ok(lie_derivatives(plant, cert, x)?.rate(u))
}

/// `Δ(x, u) = ḣ_true(x, u) - ḣ_nominal(x, u)`.
pub fn residual_truth(
    true_plant: &dyn ControlAffine,
    nominal: &dyn ControlAffine,
    cert: &Certificate,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    check_dim(
        "nominal state dimension",
        true_plant.state_dim(),
        nominal.state_dim(),
    )?;
    check_dim(
        "nominal control dimension",
        true_plant.control_dim(),
        nominal.control_dim(),
    )?;
    Ok(certificate_rate(true_plant, cert, x, u)? - certificate_rate(nominal, cert, x, u)?)
}

/// Coefficients `Φ` with `Δ(x, u) = Φ · [1, u]`.
pub fn residual_coefficients(
    true_plant: &dyn ControlAffine,
    nominal: &dyn ControlAffine,
    cert: &Certificate,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let t = lie_derivatives(true_plant, cert, x)?;
    let n = lie_derivatives(nominal, cert, x)?;
    let mut phi = DVector::zeros(t.lg.len() + 1);
    phi[0] = t.lf - n.lf;
    phi.rows_mut(1, t.lg.len()).copy_from(&(t.lg - n.lg));
    Ok(phi)
}

/// A sampled interval `[t, t + Δt)` with the control held constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: DVector<f64>,
    pub end: DVector<f64>,
    pub control: DVector<f64>,
    pub dt: f64,
}

/// One residual sample at the segment midpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub z_v: f64,
    pub z_b: f64,
}

/// Finite-difference residual measurement:
/// `z = (h(x(t+Δt)) - h(x(t))) / Δt - ḣ_nominal(x_j, u_j)` with
/// `x_j = (x(t) + x(t+Δt)) / 2`.
pub fn measure_residuals(
    segment: &Segment,
    clf: &Certificate,
    cbf: &Certificate,
    nominal: &dyn ControlAffine,
) -> Result<ResidualSample> {
    if !(segment.dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling interval must be positive, got {}",
            segment.dt
        )));
    }
    check_dim("segment end state", segment.start.len(), segment.end.len())?;
    let mid = (&segment.start + &segment.end) * 0.5;
    let fd = |c: &Certificate| (c.value(&segment.end) - c.value(&segment.start)) / segment.dt;
    let z_v = fd(clf) - certificate_rate(nominal, clf, &mid, &segment.control)?;
    let z_b = fd(cbf) - certificate_rate(nominal, cbf, &mid, &segment.control)?;
    Ok(ResidualSample {
        x: mid,
        u: segment.control.clone(),
        z_v,
        z_b,
    })
}
