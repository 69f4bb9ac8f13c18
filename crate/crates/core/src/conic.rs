//! Dense primal-dual interior-point solver for small second-order cone
//! programs
//!
//! ```text
//! minimize  cᵀx   subject to   ‖A_i x + b_i‖ ≤ e_iᵀx + d_i,  i = 1..k
//! ```
//!
//! Each cone is mapped to the slack form `s_i = h_i - G_i x ∈ K_i` with
//! `G_i = -[e_iᵀ; A_i]` and `h_i = [d_i; b_i]`. A cone whose `A` has zero rows
//! is a plain linear inequality.
//!
//! The iteration is a Mehrotra predictor-corrector method with
//! Nesterov-Todd scaling. Feasibility is settled first by a phase-one
//! program that relaxes every cone by a common scalar `σ ≥ -1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `‖A x + b‖ ≤ eᵀx + d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocCone {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: DVector<f64>,
    pub d: f64,
}

impl SocCone {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, e: DVector<f64>, d: f64) -> Result<Self> {
        check_dim("cone offset rows", a.nrows(), b.len())?;
        check_dim("cone linear term", a.ncols(), e.len())?;
        Ok(SocCone { a, b, e, d })
    }

    /// `eᵀx + d ≥ 0`.
    pub fn linear(e: DVector<f64>, d: f64) -> Self {
        SocCone {
            a: DMatrix::zeros(0, e.len()),
            b: DVector::zeros(0),
            e,
            d,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.e.len()
    }

    /// Dimension of the cone in slack space.
    pub fn dim(&self) -> usize {
        self.a.nrows() + 1
    }

    /// `eᵀx + d - ‖A x + b‖`; nonnegative iff `x` satisfies the cone.
    pub fn margin(&self, x: &DVector<f64>) -> f64 {
        self.e.dot(x) + self.d - (&self.a * x + &self.b).norm()
    }

    fn scale(&self) -> f64 {
        self.d.abs().max(self.b.amax())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocProgram {
    pub c: DVector<f64>,
    pub cones: Vec<SocCone>,
}

impl SocProgram {
    pub fn new(c: DVector<f64>, cones: Vec<SocCone>) -> Result<Self> {
        let p = SocProgram { c, cones };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cones.is_empty() {
            return Err(Error::InvalidParameter(
                "program needs at least one cone".into(),
            ));
        }
        if self.c.is_empty() {
            return Err(Error::InvalidParameter("program has no variables".into()));
        }
        for cone in &self.cones {
            check_dim("cone variable count", self.c.len(), cone.num_vars())?;
            check_dim("cone offset rows", cone.a.nrows(), cone.b.len())?;
        }
        let finite = self.c.iter().all(|v| v.is_finite())
            && self.cones.iter().all(|k| {
                k.d.is_finite()
                    && k.a.iter().all(|v| v.is_finite())
                    && k.b.iter().all(|v| v.is_finite())
                    && k.e.iter().all(|v| v.is_finite())
            });
        if !finite {
            return Err(Error::InvalidParameter("non-finite program data".into()));
        }
        Ok(())
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.c.dot(x)
    }

    /// Largest amount by which `x` violates a cone (0 if feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.cones
            .iter()
            .map(|k| (-k.margin(x)).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Smallest cone margin at `x`.
    pub fn min_margin(&self, x: &DVector<f64>) -> f64 {
        self.cones
            .iter()
            .map(|k| k.margin(x))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Epigraph variable plus cone for `Σ w_i x_i² ≤ t`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEpigraph {
    /// Index of `t` among the enlarged variable vector.
    pub t_index: usize,
    /// Linear objective selecting `t`.
    pub objective: DVector<f64>,
    /// `‖[2√w_1 x_1; …; t - 1]‖ ≤ t + 1`.
    pub cone: SocCone,
}

/// Builds the epigraph cone of a weighted sum of squares. The returned cone
/// acts on `n_vars + 1` variables, `t` being the last.
pub fn quadratic_objective_to_cone(
    weights: &[(f64, usize)],
    n_vars: usize,
) -> Result<QuadraticEpigraph> {
    let t = n_vars;
    let mut a = DMatrix::zeros(weights.len() + 1, n_vars + 1);
    for (row, &(w, idx)) in weights.iter().enumerate() {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "quadratic weight must be positive, got {w}"
            )));
        }
        if idx >= n_vars {
            return Err(Error::InvalidParameter(format!(
                "weight refers to variable {idx} of {n_vars}"
            )));
        }
        a[(row, idx)] += 2.0 * w.sqrt();
    }
    a[(weights.len(), t)] = 1.0;
    let mut b = DVector::zeros(weights.len() + 1);
    b[weights.len()] = -1.0;
    let mut e = DVector::zeros(n_vars + 1);
    e[t] = 1.0;
    let mut objective = DVector::zeros(n_vars + 1);
    objective[t] = 1.0;
    Ok(QuadraticEpigraph {
        t_index: t,
        objective,
        cone: SocCone { a, b, e, d: 1.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    /// Objective unbounded below on a feasible program.
    Unbounded,
    MaxIterations,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::MaxIterations => "max-iterations",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    /// `‖Gx + s - h‖ / max(1, ‖h‖)`
    pub primal: f64,
    /// `‖Gᵀz + c‖ / max(1, ‖c‖)`
    pub dual: f64,
    /// `sᵀz`
    pub gap: f64,
    /// `sᵀz / max(|cᵀx|, |hᵀz|)`
    pub rel_gap: f64,
    /// Largest cone violation at the returned `x`.
    pub max_violation: f64,
}

impl Residuals {
    /// Stalled but close: residuals and gap within `√tol`.
    pub fn reduced_accuracy(&self, tol: f64) -> bool {
        let loose = tol.sqrt();
        self.primal <= loose && self.dual <= loose && (self.gap <= loose || self.rel_gap <= loose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: Residuals,
    /// Optimal relaxation of the phase-one program when it ran to completion.
    pub phase_one_value: Option<f64>,
}

/// Slack-space representation: `s = h - G x` in a product of cones.
struct Standard {
    g: DMatrix<f64>,
    h: DVector<f64>,
    c: DVector<f64>,
    dims: Vec<usize>,
}

impl Standard {
    fn from_program(prog: &SocProgram) -> Self {
        let rows: usize = prog.cones.iter().map(SocCone::dim).sum();
        let n = prog.num_vars();
        let mut g = DMatrix::zeros(rows, n);
        let mut h = DVector::zeros(rows);
        let mut dims = Vec::with_capacity(prog.cones.len());
        let mut off = 0;
        for k in &prog.cones {
            g.row_mut(off).copy_from(&(-k.e.transpose()));
            h[off] = k.d;
            let q = k.a.nrows();
            if q > 0 {
                g.rows_mut(off + 1, q).copy_from(&(-&k.a));
                h.rows_mut(off + 1, q).copy_from(&k.b);
            }
            dims.push(q + 1);
            off += q + 1;
        }
        Standard {
            g,
            h,
            c: prog.c.clone(),
            dims,
        }
    }

    /// Relax every cone's scalar row by `σ` and add `σ ≥ -1`.
    fn phase_one(&self) -> Self {
        let (rows, n) = self.g.shape();
        let mut g = DMatrix::zeros(rows + 1, n + 1);
        g.view_mut((0, 0), (rows, n)).copy_from(&self.g);
        let mut off = 0;
        for &d in &self.dims {
            g[(off, n)] = -1.0;
            off += d;
        }
        g[(rows, n)] = -1.0;
        let mut h = DVector::zeros(rows + 1);
        h.rows_mut(0, rows).copy_from(&self.h);
        h[rows] = 1.0;
        let mut c = DVector::zeros(n + 1);
        c[n] = 1.0;
        let mut dims = self.dims.clone();
        dims.push(1);
        Standard { g, h, c, dims }
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.iter().scan(0usize, |off, &d| {
            let start = *off;
            *off += d;
            Some((start, d))
        })
    }
}

fn jdot(x: &[f64], y: &[f64]) -> f64 {
    x[0] * y[0] - x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum::<f64>()
}

fn tail_norm(x: &[f64]) -> f64 {
    x[1..].iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn interior(x: &[f64]) -> bool {
    x[0] > 0.0 && x[0] > tail_norm(x)
}

/// `x ∘ y` per block.
fn jordan_product(x: &[f64], y: &[f64], out: &mut [f64]) {
    out[0] = x.iter().zip(y).map(|(a, b)| a * b).sum();
    for i in 1..x.len() {
        out[i] = x[0] * y[i] + y[0] * x[i];
    }
}

/// Solves `λ ∘ y = r` for `y`.
fn jordan_divide(lam: &[f64], r: &[f64], out: &mut [f64]) {
    if lam.len() == 1 {
        out[0] = r[0] / lam[0];
        return;
    }
    let det = jdot(lam, lam);
    let tail_dot: f64 = lam[1..].iter().zip(&r[1..]).map(|(a, b)| a * b).sum();
    let y0 = (lam[0] * r[0] - tail_dot) / det;
    out[0] = y0;
    for i in 1..lam.len() {
        out[i] = (r[i] - y0 * lam[i]) / lam[0];
    }
}

/// Largest `α ≥ 0` (capped at `cap`) keeping `x + α d` in the cone.
fn max_step(x: &[f64], d: &[f64], cap: f64) -> f64 {
    if x.len() == 1 {
        return if d[0] < 0.0 {
            (-x[0] / d[0]).min(cap)
        } else {
            cap
        };
    }
    let mut alpha = cap;
    if d[0] < 0.0 {
        alpha = alpha.min(-x[0] / d[0]);
    }
    let qa = jdot(d, d);
    let qb = 2.0 * jdot(x, d);
    let qc = jdot(x, x).max(0.0);
    let root = smallest_positive_root(qa, qb, qc);
    if let Some(r) = root {
        alpha = alpha.min(r);
    }
    alpha
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return None;
    }
    if a.abs() <= 1e-300 + 1e-14 * scale {
        return (b < 0.0).then(|| -c / b);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let mut roots = [q / a, if q != 0.0 { c / q } else { f64::NAN }];
    roots.sort_by(|x, y| x.total_cmp(y));
    roots.into_iter().find(|r| r.is_finite() && *r > 0.0)
}

/// Nesterov-Todd scaling `W` of one block, with `W z = W⁻¹ s = λ`.
#[derive(Debug, Clone)]
struct Scaling {
    eta: f64,
    wbar: Vec<f64>,
}

impl Scaling {
    fn new(s: &[f64], z: &[f64]) -> Self {
        if s.len() == 1 {
            return Scaling {
                eta: (s[0] / z[0]).sqrt(),
                wbar: vec![1.0],
            };
        }
        let sn = jdot(s, s).max(f64::MIN_POSITIVE).sqrt();
        let zn = jdot(z, z).max(f64::MIN_POSITIVE).sqrt();
        let sb: Vec<f64> = s.iter().map(|v| v / sn).collect();
        let zb: Vec<f64> = z.iter().map(|v| v / zn).collect();
        let sz: f64 = sb.iter().zip(&zb).map(|(a, b)| a * b).sum();
        let gamma = ((1.0 + sz) / 2.0).max(0.0).sqrt();
        let mut wbar = Vec::with_capacity(s.len());
        wbar.push((sb[0] + zb[0]) / (2.0 * gamma));
        for i in 1..s.len() {
            wbar.push((sb[i] - zb[i]) / (2.0 * gamma));
        }
        Scaling {
            eta: (sn / zn).sqrt(),
            wbar,
        }
    }

    /// Dense `W` (`inverse = false`) or `W⁻¹`.
    fn matrix(&self, inverse: bool) -> DMatrix<f64> {
        let k = self.wbar.len();
        if k == 1 {
            let w = if inverse { 1.0 / self.eta } else { self.eta };
            return DMatrix::from_element(1, 1, w);
        }
        let w0 = self.wbar[0];
        let w1 = DVector::from_column_slice(&self.wbar[1..]);
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut m = DMatrix::zeros(k, k);
        m[(0, 0)] = w0;
        for i in 1..k {
            m[(0, i)] = sign * w1[i - 1];
            m[(i, 0)] = sign * w1[i - 1];
        }
        let tail = DMatrix::identity(k - 1, k - 1) + &w1 * w1.transpose() / (1.0 + w0);
        m.view_mut((1, 1), (k - 1, k - 1)).copy_from(&tail);
        let f = if inverse { 1.0 / self.eta } else { self.eta };
        m * f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Converged,
    /// Phase one proved the original cones are strictly satisfiable.
    StrictlyFeasible,
    /// Phase one's dual bound exceeded the infeasibility threshold.
    InfeasibleBound,
    Unbounded,
    MaxIterations,
    Breakdown,
}

struct Iterate {
    x: DVector<f64>,
    z: DVector<f64>,
    iterations: usize,
    residuals: Residuals,
}

fn shift_into_cone(std: &Standard, v: &mut DVector<f64>) {
    let mut alpha = f64::NEG_INFINITY;
    for (off, d) in std.blocks() {
        let blk = &v.as_slice()[off..off + d];
        alpha = alpha.max(tail_norm(blk) - blk[0]);
    }
    if alpha >= -1e-12 {
        let shift = 1.0 + alpha.max(0.0);
        for (off, _) in std.blocks() {
            v[off] += shift;
        }
    }
}

/// Minimum-norm least-squares solution of `M y = rhs`.
fn pseudo_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let eps = (svd.singular_values.max() * 1e-13).max(f64::MIN_POSITIVE);
    svd.solve(rhs, eps)
        .unwrap_or_else(|_| DVector::zeros(m.ncols()))
}

fn initial_point(std: &Standard) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let x = pseudo_solve(&std.g, &std.h);
    let mut s = &std.h - &std.g * &x;
    shift_into_cone(std, &mut s);
    // least-norm z with Gᵀz = -c: z = -G (GᵀG)⁺ c
    let mut z = -pseudo_solve(&std.g.transpose(), &std.c);
    shift_into_cone(std, &mut z);
    (x, s, z)
}

fn solve_reduced(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        let sol = ch.solve(rhs);
        if sol.iter().all(|v| v.is_finite()) {
            return Some(sol);
        }
    }
    let diag_max = m.diagonal().amax().max(1e-300);
    let mut reg = 1e-14 * diag_max;
    for _ in 0..6 {
        let mut mr = m.clone();
        for i in 0..mr.nrows() {
            mr[(i, i)] += reg;
        }
        if let Some(ch) = mr.cholesky() {
            let sol = ch.solve(rhs);
            if sol.iter().all(|v| v.is_finite()) {
                return Some(sol);
            }
        }
        reg *= 100.0;
    }
    m.clone()
        .lu()
        .solve(rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
}

struct Direction {
    dx: DVector<f64>,
    ds: DVector<f64>,
    dz: DVector<f64>,
}

fn run_ipm(
    std: &Standard,
    settings: &SolverSettings,
    original: Option<&SocProgram>,
    infeasible_threshold: f64,
) -> (Outcome, Iterate) {
    let (mut x, mut s, mut z) = initial_point(std);
    let n = std.g.ncols();
    let rows = std.g.nrows();
    let nu = std.dims.len() as f64;
    let hnorm = std.h.norm().max(1.0);
    let cnorm = std.c.norm().max(1.0);
    let blocks: Vec<(usize, usize)> = std.blocks().collect();
    let mut residuals = Residuals::default();
    let tol = settings.tol;

    for iter in 0..=settings.max_iter {
        // phase one: stop as soon as the unrelaxed cones are strictly satisfied
        if let Some(prog) = original {
            let xo = x.rows(0, n - 1).into_owned();
            if prog.min_margin(&xo) > 0.0 {
                return (
                    Outcome::StrictlyFeasible,
                    Iterate {
                        x,
                        z,
                        iterations: iter,
                        residuals,
                    },
                );
            }
        }

        let rx = std.g.transpose() * &z + &std.c;
        let rz = &std.g * &x + &s - &std.h;
        let gap = s.dot(&z);
        let mu = gap / nu;
        let pobj = std.c.dot(&x);
        let dobj = -std.h.dot(&z);
        residuals = Residuals {
            primal: rz.norm() / hnorm,
            dual: rx.norm() / cnorm,
            gap,
            rel_gap: gap / pobj.abs().max(dobj.abs()).max(1e-300),
            max_violation: 0.0,
        };

        let converged = residuals.primal <= tol
            && residuals.dual <= tol
            && (gap <= tol || residuals.rel_gap <= tol);
        if converged {
            return (
                Outcome::Converged,
                Iterate {
                    x,
                    z,
                    iterations: iter,
                    residuals,
                },
            );
        }
        if original.is_some() && residuals.dual <= tol && dobj > infeasible_threshold {
            return (
                Outcome::InfeasibleBound,
                Iterate {
                    x,
                    z,
                    iterations: iter,
                    residuals,
                },
            );
        }
        if original.is_none()
            && residuals.primal <= tol
            && x.amax() > 1e12 * (1.0 + hnorm)
            && pobj < -1e12 * (1.0 + hnorm)
        {
            return (
                Outcome::Unbounded,
                Iterate {
                    x,
                    z,
                    iterations: iter,
                    residuals,
                },
            );
        }
        if iter == settings.max_iter {
            break;
        }

        // scaling
        let scalings: Vec<Scaling> = blocks
            .iter()
            .map(|&(o, d)| Scaling::new(&s.as_slice()[o..o + d], &z.as_slice()[o..o + d]))
            .collect();
        let mut w = DMatrix::zeros(rows, rows);
        let mut winv = DMatrix::zeros(rows, rows);
        for (&(o, d), sc) in blocks.iter().zip(&scalings) {
            w.view_mut((o, o), (d, d)).copy_from(&sc.matrix(false));
            winv.view_mut((o, o), (d, d)).copy_from(&sc.matrix(true));
        }
        let lambda = &w * &z;
        let ghat = &winv * &std.g;
        let reduced = ghat.transpose() * &ghat;
        let winv_rz = &winv * &rz;

        let solve_dir = |rs: &DVector<f64>, scale: f64| -> Option<Direction> {
            let mut y = DVector::zeros(rows);
            for &(o, d) in &blocks {
                jordan_divide(
                    &lambda.as_slice()[o..o + d],
                    &rs.as_slice()[o..o + d],
                    &mut y.as_mut_slice()[o..o + d],
                );
            }
            let t = &winv_rz * scale + &y;
            let rhs = -(&rx * scale) - ghat.transpose() * &t;
            let dx = solve_reduced(&reduced, &rhs)?;
            let dz = &winv * (&ghat * &dx + &t);
            let ds = -(&rz * scale) - &std.g * &dx;
            Some(Direction { dx, ds, dz })
        };

        let step_len = |dir: &Direction| -> f64 {
            let mut a: f64 = 1.0 / 0.99;
            for &(o, d) in &blocks {
                a = max_step(&s.as_slice()[o..o + d], &dir.ds.as_slice()[o..o + d], a);
                a = max_step(&z.as_slice()[o..o + d], &dir.dz.as_slice()[o..o + d], a);
            }
            a
        };

        // predictor
        let mut lam_sq = DVector::zeros(rows);
        for &(o, d) in &blocks {
            let l = &lambda.as_slice()[o..o + d];
            jordan_product(l, l, &mut lam_sq.as_mut_slice()[o..o + d]);
        }
        let Some(aff) = solve_dir(&(-&lam_sq), 1.0) else {
            return (
                Outcome::Breakdown,
                Iterate {
                    x,
                    z,
                    iterations: iter,
                    residuals,
                },
            );
        };
        let alpha_aff = step_len(&aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        // corrector
        let ws = &winv * &aff.ds;
        let wz = &w * &aff.dz;
        let mut rs = -lam_sq;
        let mut corr = DVector::zeros(rows);
        for &(o, d) in &blocks {
            jordan_product(
                &ws.as_slice()[o..o + d],
                &wz.as_slice()[o..o + d],
                &mut corr.as_mut_slice()[o..o + d],
            );
            rs[o] += sigma * mu;
        }
        rs -= corr;
        let Some(dir) = solve_dir(&rs, 1.0 - sigma) else {
            return (
                Outcome::Breakdown,
                Iterate {
                    x,
                    z,
                    iterations: iter,
                    residuals,
                },
            );
        };
        let alpha = (0.99 * step_len(&dir)).min(1.0);
        if !(alpha > 0.0) || !alpha.is_finite() {
            return (
                Outcome::Breakdown,
                Iterate {
                    x,
                    z,
                    iterations: iter,
                    residuals,
                },
            );
        }
        // rounding can push a nearly converged iterate off the cone interior,
        // so shorten the step before giving up
        let mut alpha = alpha;
        let mut next = None;
        for _ in 0..30 {
            let xn = &x + &dir.dx * alpha;
            let sn = &s + &dir.ds * alpha;
            let zn = &z + &dir.dz * alpha;
            let interior_ok = blocks.iter().all(|&(o, d)| {
                interior(&sn.as_slice()[o..o + d]) && interior(&zn.as_slice()[o..o + d])
            });
            if interior_ok && xn.iter().all(|v| v.is_finite()) {
                next = Some((xn, sn, zn));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, sn, zn)) = next else {
            return (
                Outcome::Breakdown,
                Iterate {
                    x,
                    z,
                    iterations: iter,
                    residuals,
                },
            );
        };
        x = xn;
        s = sn;
        z = zn;
    }
    let iterations = settings.max_iter;
    (
        Outcome::MaxIterations,
        Iterate {
            x,
            z,
            iterations,
            residuals,
        },
    )
}

/// Solves `prog`. Inputs are validated; numerical trouble is reported via
/// the status rather than as an error.
pub fn solve(prog: &SocProgram, settings: &SolverSettings) -> Result<SolveResult> {
    prog.validate()?;
    if !(settings.tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "solver tolerance must be positive, got {}",
            settings.tol
        )));
    }
    // cones that do not depend on x are either always or never satisfied
    let constant = |k: &SocCone| k.e.iter().chain(k.a.iter()).all(|v| *v == 0.0);
    if prog
        .cones
        .iter()
        .any(|k| constant(k) && k.margin(&prog.c) < 0.0)
    {
        let x = DVector::zeros(prog.num_vars());
        let residuals = Residuals {
            max_violation: prog.max_violation(&x),
            ..Residuals::default()
        };
        return Ok(SolveResult {
            status: SolveStatus::Infeasible,
            objective: 0.0,
            x,
            iterations: 0,
            residuals,
            phase_one_value: None,
        });
    }
    if prog.cones.iter().any(constant) {
        let kept: Vec<SocCone> = prog
            .cones
            .iter()
            .filter(|k| !constant(k))
            .cloned()
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidParameter(
                "program has no variable-dependent cone".into(),
            ));
        }
        let mut res = solve(
            &SocProgram {
                c: prog.c.clone(),
                cones: kept,
            },
            settings,
        )?;
        res.residuals.max_violation = prog.max_violation(&res.x);
        return Ok(res);
    }
    let std = Standard::from_program(prog);
    let n = prog.num_vars();
    let scale = prog.cones.iter().map(SocCone::scale).fold(0.0, f64::max);
    let threshold = 10.0 * settings.tol * (1.0 + scale);

    let phase_one = std.phase_one();
    let (outcome, it) = run_ipm(&phase_one, settings, Some(prog), threshold);
    let mut iterations = it.iterations;
    let mut phase_one_value = None;
    let finish = |status, x: DVector<f64>, iterations, mut residuals: Residuals, p1| {
        residuals.max_violation = prog.max_violation(&x);
        let objective = prog.objective(&x);
        SolveResult {
            status,
            x,
            objective,
            iterations,
            residuals,
            phase_one_value: p1,
        }
    };
    match outcome {
        Outcome::StrictlyFeasible => {}
        Outcome::InfeasibleBound => {
            let x = it.x.rows(0, n).into_owned();
            return Ok(finish(
                SolveStatus::Infeasible,
                x,
                iterations,
                it.residuals,
                None,
            ));
        }
        Outcome::Converged => {
            let sigma = it.x[n];
            phase_one_value = Some(sigma);
            if sigma > threshold {
                let x = it.x.rows(0, n).into_owned();
                return Ok(finish(
                    SolveStatus::Infeasible,
                    x,
                    iterations,
                    it.residuals,
                    Some(sigma),
                ));
            }
        }
        Outcome::MaxIterations | Outcome::Breakdown | Outcome::Unbounded => {
            let sigma = it.x[n];
            if sigma > threshold && it.residuals.primal <= settings.tol.sqrt() {
                // stalled with a clearly positive relaxation
                let dobj = -phase_one.h.dot(&it.z);
                if it.residuals.dual <= settings.tol.sqrt() && dobj > threshold {
                    let x = it.x.rows(0, n).into_owned();
                    return Ok(finish(
                        SolveStatus::Infeasible,
                        x,
                        iterations,
                        it.residuals,
                        None,
                    ));
                }
            }
        }
    }

    let (outcome, it) = run_ipm(&std, settings, None, threshold);
    iterations += it.iterations;
    let status = match outcome {
        Outcome::Converged => SolveStatus::Optimal,
        Outcome::Unbounded => SolveStatus::Unbounded,
        _ if it.residuals.reduced_accuracy(settings.tol) => SolveStatus::Optimal,
        _ => SolveStatus::MaxIterations,
    };
    Ok(finish(
        status,
        it.x,
        iterations,
        it.residuals,
        phase_one_value,
    ))
}
