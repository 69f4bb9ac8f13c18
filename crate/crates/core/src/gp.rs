//! GP regression of certificate residuals with the ADP compound kernel.
//!
//! With the ADP kernel the posterior at a query state `x` is an affine
//! function of `y = [1, u]` for the mean and a quadratic form for the
//! variance:
//!
//! ```text
//! μ(x, u)  = b(x)ᵀ y,     b(x) = K_{*Y} (K_c + σ_n² I)⁻¹ z
//! σ²(x, u) = yᵀ C(x) y,   C(x) = diag(k_i(x, x)) - K_{*Y} (K_c + σ_n² I)⁻¹ K_{*Y}ᵀ
//! ```
//!
//! where `K_{*Y}[i, j] = k_i(x, x_j) · y_j[i]`.
//!
//! The confidence multiplier β is a configured constant. For bounded kernels
//! and bounded measurement noise it corresponds to
//! `β = sqrt(2η² + 300 κ_{N+1} ln³((N + 1)/δ))`, with `η` an RKHS norm bound of
//! the residual and `κ_{N+1}` the maximum information gain; neither is
//! computable from data, so β is never derived from that expression here.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{AdpKernel, AugmentedInput};
use crate::linalg::{augment, sym_sqrt, symmetrize};

/// Jitter ladder (relative to the mean Gram diagonal) tried when the
/// Cholesky factorization of `K_c + σ_n² I` fails.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Relative eigenvalue floor used for the square root `G` of `C`.
const SQRT_EIG_FLOOR: f64 = 1e-12;

/// Residual measurements `z_j ≈ Δ(x_j, u_j)` with a shared noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset {
    state_dim: usize,
    control_dim: usize,
    inputs: Vec<AugmentedInput>,
    targets: Vec<f64>,
    noise_std: f64,
}

impl ResidualDataset {
    pub fn empty(state_dim: usize, control_dim: usize, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise std must be nonnegative, got {noise_std}"
            )));
        }
        Ok(ResidualDataset {
            state_dim,
            control_dim,
            inputs: Vec::new(),
            targets: Vec::new(),
            noise_std,
        })
    }

    /// Builds a dataset from column matrices: `states` is `n × N`, `augmented`
    /// is `(m + 1) × N` with every first entry equal to 1.
    pub fn from_columns(
        states: &DMatrix<f64>,
        augmented: &DMatrix<f64>,
        targets: &DVector<f64>,
        noise_std: f64,
    ) -> Result<Self> {
        check_dim("augmented input columns", states.ncols(), augmented.ncols())?;
        check_dim("measurement count", states.ncols(), targets.len())?;
        if augmented.nrows() < 2 {
            return Err(Error::InvalidParameter(
                "augmented inputs need at least two rows".into(),
            ));
        }
        let mut ds = ResidualDataset::empty(states.nrows(), augmented.nrows() - 1, noise_std)?;
        for j in 0..states.ncols() {
            let input = AugmentedInput::from_augmented(
                states.column(j).into_owned(),
                augmented.column(j).into_owned(),
            )?;
            ds.inputs.push(input);
            ds.targets.push(targets[j]);
        }
        Ok(ds)
    }

    pub fn push(&mut self, x: &DVector<f64>, u: &DVector<f64>, z: f64) -> Result<()> {
        check_dim("sample state", self.state_dim, x.len())?;
        check_dim("sample control", self.control_dim, u.len())?;
        self.inputs.push(AugmentedInput::new(x.clone(), u));
        self.targets.push(z);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn inputs(&self) -> &[AugmentedInput] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// `X`, the `n × N` state matrix.
    pub fn states_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.state_dim, self.len());
        for (j, a) in self.inputs.iter().enumerate() {
            m.set_column(j, &a.x);
        }
        m
    }

    /// `Y`, the `(m + 1) × N` augmented-input matrix.
    pub fn augmented_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.control_dim + 1, self.len());
        for (j, a) in self.inputs.iter().enumerate() {
            m.set_column(j, a.y());
        }
        m
    }
}

/// Mean coefficients `b`, variance Gram `C` and its symmetric square root `G`
/// at one query state.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePrediction {
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl AffinePrediction {
    pub fn mean(&self, u: &DVector<f64>) -> f64 {
        self.b.dot(&augment(u))
    }

    pub fn variance(&self, u: &DVector<f64>) -> f64 {
        let y = augment(u);
        (y.transpose() * &self.c * &y)[0].max(0.0)
    }
}

/// A GP posterior over one residual, cached for repeated prediction.
#[derive(Debug, Clone)]
pub struct ResidualGp {
    dataset: ResidualDataset,
    kernel: AdpKernel,
    factor: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    beta: f64,
    jitter: f64,
}

impl ResidualGp {
    /// Factorizes `K_c + σ_n² I` once. An empty dataset yields the prior.
    pub fn fit(dataset: ResidualDataset, kernel: AdpKernel, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "confidence multiplier must be nonnegative, got {beta}"
            )));
        }
        check_dim(
            "kernel components vs control dimension + 1",
            dataset.control_dim + 1,
            kernel.components().len(),
        )?;
        if let Some(n) = kernel.state_dim() {
            check_dim(
                "kernel lengthscales vs state dimension",
                dataset.state_dim,
                n,
            )?;
        }
        if dataset.is_empty() {
            return Ok(ResidualGp {
                dataset,
                kernel,
                factor: None,
                alpha: DVector::zeros(0),
                beta,
                jitter: 0.0,
            });
        }

        let n = dataset.len();
        let mut gram = kernel.gram(&dataset.inputs)?;
        let noise_var = dataset.noise_std * dataset.noise_std;
        for i in 0..n {
            gram[(i, i)] += noise_var;
        }
        let scale = {
            let mean_diag = gram.diagonal().mean();
            if mean_diag > 0.0 {
                mean_diag
            } else {
                1.0
            }
        };
        let mut last_jitter = 0.0;
        for rel in JITTER_LADDER {
            let jitter = rel * scale;
            last_jitter = jitter;
            let mut shifted = gram.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(factor) = Cholesky::new(shifted) {
                let z = DVector::from_column_slice(&dataset.targets);
                let alpha = factor.solve(&z);
                return Ok(ResidualGp {
                    dataset,
                    kernel,
                    factor: Some(factor),
                    alpha,
                    beta,
                    jitter,
                });
            }
        }
        Err(Error::Factorization {
            jitter: last_jitter,
        })
    }

    pub fn dataset(&self) -> &ResidualDataset {
        &self.dataset
    }

    pub fn kernel(&self) -> &AdpKernel {
        &self.kernel
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Diagonal jitter that was needed on top of `σ_n² I`.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `(K_c + σ_n² I)⁻¹ z`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower-triangular factor `L` with `L Lᵀ = K_c + σ_n² I (+ jitter)`.
    pub fn factor_l(&self) -> Option<DMatrix<f64>> {
        self.factor.as_ref().map(|f| f.l())
    }

    pub fn state_dim(&self) -> usize {
        self.dataset.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.dataset.control_dim
    }

    /// `K_{*Y}`, the `(m + 1) × N` cross-covariance at `x`.
    fn cross_covariance(&self, x: &[f64]) -> DMatrix<f64> {
        let rows = self.dataset.control_dim + 1;
        let n = self.dataset.len();
        let mut k = DMatrix::zeros(rows, n);
        for (j, input) in self.dataset.inputs.iter().enumerate() {
            let kv = self
                .kernel
                .component_values_unchecked(x, input.x.as_slice());
            let y = input.y();
            for i in 0..rows {
                k[(i, j)] = kv[i] * y[i];
            }
        }
        k
    }

    pub fn predict_affine(&self, x: &DVector<f64>) -> Result<AffinePrediction> {
        check_dim("query state", self.dataset.state_dim, x.len())?;
        let xs = x.as_slice();
        let prior = DMatrix::from_diagonal(&self.kernel.component_values_unchecked(xs, xs));
        let (b, c) = match &self.factor {
            None => (DVector::zeros(self.dataset.control_dim + 1), prior),
            Some(factor) => {
                let kstar = self.cross_covariance(xs);
                let b = &kstar * &self.alpha;
                let mut v = kstar.transpose();
                factor.l_dirty().solve_lower_triangular_mut(&mut v);
                let c = symmetrize(&(prior - v.transpose() * v));
                (b, c)
            }
        };
        let floor = SQRT_EIG_FLOOR * c.diagonal().max().max(0.0);
        let g = sym_sqrt(&c, floor);
        Ok(AffinePrediction { b, c, g })
    }

    /// Posterior mean and variance at `(x, u)`.
    pub fn predict_mean_var(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(f64, f64)> {
        check_dim("query control", self.dataset.control_dim, u.len())?;
        let p = self.predict_affine(x)?;
        Ok((p.mean(u), p.variance(u)))
    }

    /// `(μ - βσ, μ + βσ)`.
    pub fn confidence_interval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(f64, f64)> {
        let (mean, var) = self.predict_mean_var(x, u)?;
        let half = self.beta * var.sqrt();
        Ok((mean - half, mean + half))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::BaseKernel;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_kernel(m: usize) -> AdpKernel {
        AdpKernel::new(vec![BaseKernel::constant(1.0).unwrap(); m + 1]).unwrap()
    }

    fn se_kernel(n: usize, m: usize) -> AdpKernel {
        AdpKernel::new(
            (0..=m)
                .map(|i| {
                    BaseKernel::squared_exponential(
                        1.0 + 0.3 * i as f64,
                        vec![0.8 + 0.2 * i as f64; n],
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn single_point_gp() -> ResidualGp {
        let mut ds = ResidualDataset::empty(1, 1, 1.0).unwrap();
        ds.push(&dvector![0.0], &dvector![1.0], 3.0).unwrap();
        ResidualGp::fit(ds, constant_kernel(1), 2.0).unwrap()
    }

    #[test]
    fn empty_dataset_gives_prior() {
        let k = se_kernel(2, 2);
        let gp =
            ResidualGp::fit(ResidualDataset::empty(2, 2, 0.1).unwrap(), k.clone(), 2.0).unwrap();
        let x = dvector![0.4, -1.0];
        let p = gp.predict_affine(&x).unwrap();
        assert_eq!(p.b, DVector::zeros(3));
        let diag = k.component_values(x.as_slice(), x.as_slice()).unwrap();
        assert_eq!(p.c, DMatrix::from_diagonal(&diag));

        let u = dvector![1.5, -0.5];
        let (mean, var) = gp.predict_mean_var(&x, &u).unwrap();
        assert_eq!(mean, 0.0);
        let expected = diag[0] + diag[1] * u[0] * u[0] + diag[2] * u[1] * u[1];
        assert!((var - expected).abs() < 1e-14);

        let gp = ResidualGp::fit(
            ResidualDataset::empty(2, 1, 0.1).unwrap(),
            constant_kernel(1),
            2.0,
        )
        .unwrap();
        assert_eq!(gp.predict_affine(&x).unwrap().c, DMatrix::identity(2, 2));
    }

    #[test]
    fn single_point_posterior_by_hand() {
        let gp = single_point_gp();
        // K_c + σ² = 2 + 1 = 3, z = 3
        assert!((gp.alpha()[0] - 1.0).abs() < 1e-15);
        let p = gp.predict_affine(&dvector![5.0]).unwrap();
        assert!((p.b - dvector![1.0, 1.0]).norm() < 1e-15);
        let expected_c =
            DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0]);
        assert!((&p.c - expected_c).norm() < 1e-15);
        let (mean, var) = gp.predict_mean_var(&dvector![5.0], &dvector![0.0]).unwrap();
        assert!((mean - 1.0).abs() < 1e-15);
        assert!((var - 2.0 / 3.0).abs() < 1e-15);
        let (lo, hi) = gp
            .confidence_interval(&dvector![5.0], &dvector![0.0])
            .unwrap();
        let half = 2.0 * (2.0f64 / 3.0).sqrt();
        assert!((lo - (1.0 - half)).abs() < 1e-14 && (hi - (1.0 + half)).abs() < 1e-14);
    }

    #[test]
    fn zero_beta_collapses_interval() {
        let mut ds = ResidualDataset::empty(1, 1, 1.0).unwrap();
        ds.push(&dvector![0.0], &dvector![1.0], 3.0).unwrap();
        let gp = ResidualGp::fit(ds, constant_kernel(1), 0.0).unwrap();
        let (lo, hi) = gp
            .confidence_interval(&dvector![1.0], &dvector![2.0])
            .unwrap();
        assert_eq!(lo, hi);
    }

    #[test]
    fn duplicate_points_need_jitter() {
        let mut ds = ResidualDataset::empty(2, 1, 0.0).unwrap();
        for _ in 0..4 {
            ds.push(&dvector![0.1, 0.2], &dvector![0.5], 1.0).unwrap();
        }
        let gp = ResidualGp::fit(ds, se_kernel(2, 1), 2.0).unwrap();
        assert!(gp.jitter() > 0.0);
        let (mean, var) = gp
            .predict_mean_var(&dvector![0.0, 0.0], &dvector![1.0])
            .unwrap();
        assert!(mean.is_finite() && var.is_finite());
    }

    #[test]
    fn factor_reconstructs_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ds = ResidualDataset::empty(2, 2, 0.3).unwrap();
        for _ in 0..10 {
            let x = dvector![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let u = dvector![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            ds.push(&x, &u, rng.gen_range(-1.0..1.0)).unwrap();
        }
        let k = se_kernel(2, 2);
        let mut gram = k.gram(ds.inputs()).unwrap();
        for i in 0..10 {
            gram[(i, i)] += 0.09;
        }
        let gp = ResidualGp::fit(ds, k, 2.0).unwrap();
        let l = gp.factor_l().unwrap();
        assert!((&l * l.transpose() - &gram).norm() <= 1e-8 * gram.norm());
    }

    #[test]
    fn square_root_matches_variance() {
        let gp = single_point_gp();
        let p = gp.predict_affine(&dvector![0.3]).unwrap();
        assert!((&p.g * &p.g - &p.c).norm() <= 1e-8 * p.c.norm());
        for u in [-3.0, 0.0, 0.7, 10.0] {
            let u = dvector![u];
            let y = augment(&u);
            let via_g = (&p.g * &y).norm_squared();
            assert!((via_g - p.variance(&u)).abs() <= 1e-10 * (1.0 + via_g));
        }
    }

    #[test]
    fn rejects_dimension_mismatches() {
        let gp = single_point_gp();
        assert!(gp.predict_affine(&dvector![0.0, 1.0]).is_err());
        assert!(gp
            .predict_mean_var(&dvector![0.0], &dvector![0.0, 1.0])
            .is_err());
        let ds = ResidualDataset::empty(1, 2, 0.1).unwrap();
        assert!(ResidualGp::fit(ds, constant_kernel(1), 1.0).is_err());
    }

    #[test]
    fn columns_round_trip() {
        let mut ds = ResidualDataset::empty(2, 1, 0.1).unwrap();
        ds.push(&dvector![1.0, 2.0], &dvector![3.0], 4.0).unwrap();
        ds.push(&dvector![5.0, 6.0], &dvector![7.0], 8.0).unwrap();
        let again = ResidualDataset::from_columns(
            &ds.states_matrix(),
            &ds.augmented_matrix(),
            &DVector::from_column_slice(ds.targets()),
            0.1,
        )
        .unwrap();
        assert_eq!(ds, again);
        let mut bad = ds.augmented_matrix();
        bad[(0, 1)] = 0.5;
        assert!(ResidualDataset::from_columns(
            &ds.states_matrix(),
            &bad,
            &DVector::from_column_slice(ds.targets()),
            0.1
        )
        .is_err());
    }
}
