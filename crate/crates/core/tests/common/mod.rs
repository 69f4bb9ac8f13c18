//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use gpcbf_core::conic::SocProgram;
use gpcbf_core::feasibility::SocConstraint;
use gpcbf_core::gp::{ResidualDataset, ResidualGp};
use gpcbf_core::kernels::{AdpKernel, BaseKernel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Hyperparameters of one squared-exponential component.
#[derive(Debug, Clone)]
pub struct Se {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl Se {
    pub fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for i in 0..a.len() {
            let d = (a[i] - b[i]) / self.lengthscales[i];
            r2 += d * d;
        }
        self.variance * (-0.5 * r2).exp()
    }

    pub fn base(&self) -> BaseKernel {
        BaseKernel::squared_exponential(self.variance, self.lengthscales.clone()).unwrap()
    }
}

/// Plain GP regression on stacked inputs `(x, u)` with the compound kernel
/// `Σ_i y_i y'_i k_i(x, x')`, `y = [1, u]`. Solves with LU rather than
/// Cholesky and never forms the affine decomposition.
#[derive(Clone)]
pub struct GenericGp {
    pub comps: Vec<Se>,
    pub xs: Vec<Vec<f64>>,
    pub us: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub noise_var: f64,
}

impl GenericGp {
    fn stacked_k(&self, x: &[f64], u: &[f64], x2: &[f64], u2: &[f64]) -> f64 {
        let mut s = self.comps[0].k(x, x2);
        for (i, c) in self.comps.iter().enumerate().skip(1) {
            s += u[i - 1] * u2[i - 1] * c.k(x, x2);
        }
        s
    }

    pub fn predict(&self, x: &[f64], u: &[f64]) -> (f64, f64) {
        let n = self.z.len();
        let prior = self.stacked_k(x, u, x, u);
        if n == 0 {
            return (0.0, prior);
        }
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = self.stacked_k(&self.xs[i], &self.us[i], &self.xs[j], &self.us[j]);
            }
            k[(i, i)] += self.noise_var;
        }
        let ks = DVector::from_iterator(
            n,
            (0..n).map(|i| self.stacked_k(x, u, &self.xs[i], &self.us[i])),
        );
        let lu = k.lu();
        let alpha = lu.solve(&DVector::from_column_slice(&self.z)).unwrap();
        let beta = lu.solve(&ks).unwrap();
        (ks.dot(&alpha), prior - ks.dot(&beta))
    }
}

pub struct RandomGp {
    pub gp: ResidualGp,
    pub oracle: GenericGp,
}

pub fn random_components<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<Se> {
    (0..=m)
        .map(|_| Se {
            variance: rng.gen_range(0.2..2.0),
            lengthscales: (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
        })
        .collect()
}

/// Random dataset with `points` samples and a fitted GP plus its oracle.
pub fn random_gp<R: Rng>(rng: &mut R, n: usize, m: usize, points: usize, beta: f64) -> RandomGp {
    let comps = random_components(rng, n, m);
    let noise_std = rng.gen_range(0.05..0.5);
    let mut ds = ResidualDataset::empty(n, m, noise_std).unwrap();
    let mut xs = Vec::new();
    let mut us = Vec::new();
    let mut z = Vec::new();
    for _ in 0..points {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = rng.gen_range(-1.0..1.0);
        ds.push(
            &DVector::from_column_slice(&x),
            &DVector::from_column_slice(&u),
            t,
        )
        .unwrap();
        xs.push(x);
        us.push(u);
        z.push(t);
    }
    let kernel = AdpKernel::new(comps.iter().map(Se::base).collect()).unwrap();
    let gp = ResidualGp::fit(ds, kernel, beta).unwrap();
    assert_eq!(gp.jitter(), 0.0);
    RandomGp {
        gp,
        oracle: GenericGp {
            comps,
            xs,
            us,
            z,
            noise_var: noise_std * noise_std,
        },
    }
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Symmetric positive-definite square root of a random covariance,
/// playing the role of `βG`.
pub fn random_rq<R: Rng>(rng: &mut R, m: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, m + 1, m + 1);
    let c = &a * a.transpose() + DMatrix::identity(m + 1, m + 1) * 0.05;
    let eig = c.symmetric_eigen();
    let sq = eig.eigenvalues.map(f64::sqrt);
    &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Hyperbolic,
    Elliptic,
    Parabolic,
}

/// Chance constraint `‖Qu + r‖ ≤ wu + v` with `[r Q]` a random PD square
/// root and `w` chosen to produce the requested geometry.
pub fn random_constraint<R: Rng>(rng: &mut R, m: usize, shape: Shape) -> SocConstraint {
    let rq = random_rq(rng, m);
    let r = rq.column(0).into_owned();
    let q = rq.columns(1, m).into_owned();
    let qtq = q.transpose() * &q;
    let dir = random_vector(rng, m).normalize();
    // w wᵀ has one nonzero eigenvalue; F is singular when wᵀ(QᵀQ)⁻¹w = 1
    let unit = 1.0 / dir.dot(&(qtq.clone().try_inverse().unwrap() * &dir)).sqrt();
    let s = match shape {
        Shape::Hyperbolic => rng.gen_range(1.2..4.0),
        Shape::Elliptic => rng.gen_range(0.0..0.8),
        Shape::Parabolic => 1.0,
    };
    let w = dir * (unit * s);
    let scale = rq.norm();
    let v = match shape {
        Shape::Parabolic => rng.gen_range(-3.0..3.0) * scale,
        _ => rng.gen_range(-2.0..2.0) * scale,
    };
    SocConstraint::new(q, r, w, v).unwrap()
}

/// Minimum of `cᵀx` over a two-variable program by nested grid refinement
/// inside `[centre ± half]²`.
pub fn grid_min_2d(prog: &SocProgram, centre: [f64; 2], half: f64) -> Option<(f64, [f64; 2])> {
    let feasible = |p: [f64; 2]| {
        let x = DVector::from_column_slice(&p);
        prog.cones.iter().all(|k| k.margin(&x) >= 0.0)
    };
    let obj = |p: [f64; 2]| prog.c[0] * p[0] + prog.c[1] * p[1];
    let pts = 401;
    let mut c = centre;
    let mut h = half;
    let mut best: Option<(f64, [f64; 2])> = None;
    for _ in 0..8 {
        let step = 2.0 * h / (pts - 1) as f64;
        let mut round: Option<(f64, [f64; 2])> = None;
        for i in 0..pts {
            for j in 0..pts {
                let p = [c[0] - h + i as f64 * step, c[1] - h + j as f64 * step];
                if feasible(p) {
                    let f = obj(p);
                    if round.is_none_or(|(b, _)| f < b) {
                        round = Some((f, p));
                    }
                }
            }
        }
        let Some(r) = round else { break };
        if best.is_none_or(|(b, _)| r.0 < b) {
            best = Some(r);
        }
        c = best.unwrap().1;
        h = 10.0 * step;
    }
    best
}

/// Random well-posed two-variable SOCP: a ball around an interior point,
/// plus a few random cones that contain the point strictly.
pub fn random_socp_2d<R: Rng>(rng: &mut R) -> (SocProgram, [f64; 2], f64) {
    use gpcbf_core::conic::SocCone;
    let centre = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    let xc = DVector::from_column_slice(&centre);
    let radius = rng.gen_range(0.5..3.0);
    let mut cones = vec![SocCone::new(
        DMatrix::identity(2, 2),
        -xc.clone(),
        DVector::zeros(2),
        radius,
    )
    .unwrap()];
    for _ in 0..rng.gen_range(1..=3) {
        let rows = rng.gen_range(0..=2);
        let a = random_matrix(rng, rows, 2);
        let b = random_vector(rng, rows);
        let e = random_vector(rng, 2) * 2.0;
        let slack = rng.gen_range(0.05..1.0);
        let d = (&a * &xc + &b).norm() - e.dot(&xc) + slack;
        cones.push(SocCone::new(a, b, e, d).unwrap());
    }
    let c = random_vector(rng, 2);
    (SocProgram::new(c, cones).unwrap(), centre, radius)
}

/// `min ‖u‖²` subject to one chance constraint, in epigraph form.
pub fn min_norm_program(c: &SocConstraint) -> SocProgram {
    use gpcbf_core::conic::{quadratic_objective_to_cone, SocCone};
    let m = c.control_dim();
    let weights: Vec<(f64, usize)> = (0..m).map(|i| (1.0, i)).collect();
    let epi = quadratic_objective_to_cone(&weights, m).unwrap();
    let mut a = DMatrix::zeros(c.q.nrows(), m + 1);
    a.view_mut((0, 0), (c.q.nrows(), m)).copy_from(&c.q);
    let mut e = DVector::zeros(m + 1);
    e.rows_mut(0, m).copy_from(&c.w);
    let cone = SocCone::new(a, c.r.clone(), e, c.v).unwrap();
    SocProgram::new(epi.objective, vec![epi.cone, cone]).unwrap()
}
