//! Base kernels on the state space and the Affine Dot Product (ADP)
//! compound kernel on (state, augmented input) pairs.
//!
//! The ADP kernel combines `m + 1` state kernels through the augmented
//! input `y = [1, u]`:
//!
//! ```text
//! k_c((x, y), (x', y')) = y^T diag(k_1(x, x'), ..., k_{m+1}(x, x')) y'
//! ```
//!
//! so a GP with this kernel has a posterior mean that is affine in `u` and a
//! posterior variance that is quadratic in `u`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Positive-definite kernel on the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseKernel {
    /// `σ² exp(-½ Σ_d (x_d - x'_d)² / ℓ_d²)`
    SquaredExponential {
        variance: f64,
        lengthscales: Vec<f64>,
    },
    /// `σ²` for every pair of states.
    Constant { variance: f64 },
}

impl BaseKernel {
    pub fn squared_exponential(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let k = BaseKernel::SquaredExponential {
            variance,
            lengthscales,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn constant(variance: f64) -> Result<Self> {
        let k = BaseKernel::Constant { variance };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let variance = self.variance();
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel signal variance must be positive, got {variance}"
            )));
        }
        if let BaseKernel::SquaredExponential { lengthscales, .. } = self {
            if lengthscales.is_empty() {
                return Err(Error::InvalidParameter(
                    "squared-exponential kernel needs at least one lengthscale".into(),
                ));
            }
            if let Some(l) = lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
                return Err(Error::InvalidParameter(format!(
                    "kernel lengthscales must be positive, got {l}"
                )));
            }
        }
        Ok(())
    }

    pub fn variance(&self) -> f64 {
        match self {
            BaseKernel::SquaredExponential { variance, .. } | BaseKernel::Constant { variance } => {
                *variance
            }
        }
    }

    /// State dimension this kernel is defined on, if it is fixed.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            BaseKernel::SquaredExponential { lengthscales, .. } => Some(lengthscales.len()),
            BaseKernel::Constant { .. } => None,
        }
    }

    /// Evaluates `k(x, x')`.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        check_dim("second kernel argument", x.len(), x2.len())?;
        if let Some(n) = self.input_dim() {
            check_dim("kernel argument vs lengthscales", n, x.len())?;
        }
        Ok(self.value(x, x2))
    }

    /// `k(x, x')` without dimension checks.
    pub(crate) fn value(&self, x: &[f64], x2: &[f64]) -> f64 {
        match self {
            BaseKernel::Constant { variance } => *variance,
            BaseKernel::SquaredExponential {
                variance,
                lengthscales,
            } => {
                let r2: f64 = x
                    .iter()
                    .zip(x2)
                    .zip(lengthscales)
                    .map(|((a, b), l)| {
                        let d = (a - b) / l;
                        d * d
                    })
                    .sum();
                variance * (-0.5 * r2).exp()
            }
        }
    }
}

/// A state paired with its augmented control `y = [1, u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedInput {
    pub x: DVector<f64>,
    y: DVector<f64>,
}

impl AugmentedInput {
    pub fn new(x: DVector<f64>, u: &DVector<f64>) -> Self {
        let mut y = DVector::zeros(u.len() + 1);
        y[0] = 1.0;
        y.rows_mut(1, u.len()).copy_from(u);
        AugmentedInput { x, y }
    }

    /// Builds an input from an explicit augmented vector, which must start with 1.
    pub fn from_augmented(x: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        if y.is_empty() || y[0] != 1.0 {
            return Err(Error::InvalidParameter(
                "augmented input must have first entry exactly 1".into(),
            ));
        }
        Ok(AugmentedInput { x, y })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn control(&self) -> DVector<f64> {
        self.y.rows(1, self.y.len() - 1).into_owned()
    }
}

/// Affine Dot Product compound kernel of `m + 1` base kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdpKernel {
    components: Vec<BaseKernel>,
}

impl AdpKernel {
    /// `components[0]` acts on the drift term, `components[i]` on `u_i`.
    pub fn new(components: Vec<BaseKernel>) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "ADP kernel needs m + 1 >= 2 components, got {}",
                components.len()
            )));
        }
        for c in &components {
            c.validate()?;
        }
        let dims: Vec<usize> = components
            .iter()
            .filter_map(BaseKernel::input_dim)
            .collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidParameter(
                "ADP kernel components disagree on the state dimension".into(),
            ));
        }
        Ok(AdpKernel { components })
    }

    pub fn components(&self) -> &[BaseKernel] {
        &self.components
    }

    /// Control dimension `m`.
    pub fn control_dim(&self) -> usize {
        self.components.len() - 1
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.components.iter().find_map(BaseKernel::input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        AdpKernel::new(self.components.clone()).map(|_| ())
    }

    pub(crate) fn check_state(&self, x: &[f64]) -> Result<()> {
        match self.state_dim() {
            Some(n) => check_dim("state dimension", n, x.len()),
            None => Ok(()),
        }
    }

    /// `[k_1(x, x'), ..., k_{m+1}(x, x')]`.
    pub fn component_values(&self, x: &[f64], x2: &[f64]) -> Result<DVector<f64>> {
        self.check_state(x)?;
        check_dim("second state", x.len(), x2.len())?;
        Ok(self.component_values_unchecked(x, x2))
    }

    pub(crate) fn component_values_unchecked(&self, x: &[f64], x2: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.components.len(),
            self.components.iter().map(|k| k.value(x, x2)),
        )
    }

    /// Kernel value on raw `(x, y)` pairs. `y` is not required to start with 1,
    /// which makes the bilinear structure directly testable.
    pub fn eval_raw(&self, x: &[f64], y: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        check_dim("augmented input", self.components.len(), y.len())?;
        check_dim("augmented input", self.components.len(), y2.len())?;
        self.check_state(x)?;
        check_dim("second state", x.len(), x2.len())?;
        Ok(self.eval_unchecked(x, y, x2, y2))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64], x2: &[f64], y2: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(y.iter().zip(y2))
            .map(|(k, (a, b))| a * b * k.value(x, x2))
            .sum()
    }

    pub fn eval(&self, a: &AugmentedInput, b: &AugmentedInput) -> Result<f64> {
        self.eval_raw(
            a.x.as_slice(),
            a.y.as_slice(),
            b.x.as_slice(),
            b.y.as_slice(),
        )
    }

    /// Gram matrix `K_c` over `inputs`.
    pub fn gram(&self, inputs: &[AugmentedInput]) -> Result<DMatrix<f64>> {
        for a in inputs {
            check_dim("augmented input", self.components.len(), a.y.len())?;
            self.check_state(a.x.as_slice())?;
        }
        let n = inputs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let (a, b) = (&inputs[i], &inputs[j]);
                let v = self.eval_unchecked(
                    a.x.as_slice(),
                    a.y.as_slice(),
                    b.x.as_slice(),
                    b.y.as_slice(),
                );
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn se(var: f64, l: f64, n: usize) -> BaseKernel {
        BaseKernel::squared_exponential(var, vec![l; n]).unwrap()
    }

    #[test]
    fn base_kernel_values() {
        let k = se(1.0, 1.0, 1);
        assert_eq!(k.eval(&[0.0], &[0.0]).unwrap(), 1.0);
        assert!((k.eval(&[0.0], &[2.0]).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        let c = BaseKernel::constant(1.0).unwrap();
        assert_eq!(c.eval(&[3.0, -1.0], &[0.5, 9.0]).unwrap(), 1.0);
    }

    #[test]
    fn base_kernel_rejects_bad_parameters() {
        assert!(BaseKernel::constant(0.0).is_err());
        assert!(BaseKernel::squared_exponential(1.0, vec![1.0, -2.0]).is_err());
        assert!(BaseKernel::squared_exponential(-1.0, vec![1.0]).is_err());
        assert!(matches!(
            se(1.0, 1.0, 2).eval(&[0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn adp_constant_components() {
        let k = AdpKernel::new(vec![BaseKernel::constant(1.0).unwrap(); 2]).unwrap();
        let x = dvector![0.3, 0.7];
        let a = AugmentedInput::new(x.clone(), &dvector![1.0]);
        assert_eq!(k.eval(&a, &a).unwrap(), 2.0);
        let (u, u2) = (1.7, -0.4);
        let a = AugmentedInput::new(x.clone(), &dvector![u]);
        let b = AugmentedInput::new(x, &dvector![u2]);
        assert!((k.eval(&a, &b).unwrap() - (1.0 + u * u2)).abs() < 1e-15);
    }

    #[test]
    fn adp_zero_control_keeps_first_component() {
        let k = AdpKernel::new(vec![se(2.0, 0.5, 2), se(3.0, 1.5, 2), se(0.1, 1.0, 2)]).unwrap();
        let a = AugmentedInput::new(dvector![0.1, 0.2], &dvector![0.0, 0.0]);
        let b = AugmentedInput::new(dvector![-0.4, 1.0], &dvector![0.0, 0.0]);
        let expected = k.components()[0].eval(&[0.1, 0.2], &[-0.4, 1.0]).unwrap();
        assert_eq!(k.eval(&a, &b).unwrap(), expected);
    }

    #[test]
    fn adp_requires_leading_one() {
        assert!(AugmentedInput::from_augmented(dvector![0.0], dvector![0.5, 1.0]).is_err());
        assert!(AugmentedInput::from_augmented(dvector![0.0], dvector![1.0, 1.0]).is_ok());
        let k = AdpKernel::new(vec![BaseKernel::constant(1.0).unwrap(); 3]).unwrap();
        let a = AugmentedInput::new(dvector![0.0], &dvector![1.0]);
        assert!(k.eval(&a, &a).is_err());
    }

    #[test]
    fn gram_single_and_duplicate() {
        let k = AdpKernel::new(vec![BaseKernel::constant(1.0).unwrap(); 2]).unwrap();
        let a = AugmentedInput::new(dvector![0.0], &dvector![1.0]);
        assert_eq!(
            k.gram(std::slice::from_ref(&a)).unwrap(),
            DMatrix::from_element(1, 1, 2.0)
        );

        let k = AdpKernel::new(vec![se(1.0, 1.0, 1), se(1.0, 1.0, 1)]).unwrap();
        let g = k.gram(&[a.clone(), a]).unwrap();
        let eig = g.symmetric_eigen();
        assert!(eig.eigenvalues.min().abs() < 1e-12);
    }

    #[test]
    fn gram_matches_pairwise_evaluation() {
        let k = AdpKernel::new(vec![se(1.2, 0.8, 2), se(0.5, 2.0, 2)]).unwrap();
        let inputs = vec![
            AugmentedInput::new(dvector![0.1, -0.3], &dvector![0.4]),
            AugmentedInput::new(dvector![1.1, 0.2], &dvector![-2.0]),
            AugmentedInput::new(dvector![-0.7, 0.9], &dvector![1.3]),
        ];
        let g = k.gram(&inputs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (&inputs[i], &inputs[j]);
                let kx1 = (-0.5 * ((a.x[0] - b.x[0]).powi(2) + (a.x[1] - b.x[1]).powi(2)) / 0.64)
                    .exp()
                    * 1.2;
                let kx2 = (-0.5 * ((a.x[0] - b.x[0]).powi(2) + (a.x[1] - b.x[1]).powi(2)) / 4.0)
                    .exp()
                    * 0.5;
                let expected = kx1 + a.y()[1] * b.y()[1] * kx2;
                assert!((g[(i, j)] - expected).abs() < 1e-14);
            }
        }
    }

    fn input_strategy(n: usize, m: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(-3.0..3.0f64, m),
        )
    }

    proptest! {
        #[test]
        fn gram_is_psd(points in prop::collection::vec(input_strategy(2, 2), 1..12)) {
            let k = AdpKernel::new(vec![se(1.0, 0.7, 2), se(0.3, 1.3, 2), BaseKernel::constant(0.2).unwrap()]).unwrap();
            let inputs: Vec<_> = points
                .iter()
                .map(|(x, u)| AugmentedInput::new(DVector::from_column_slice(x), &DVector::from_column_slice(u)))
                .collect();
            let g = k.gram(&inputs).unwrap();
            let max_diag = g.diagonal().max();
            let min_eig = g.symmetric_eigen().eigenvalues.min();
            prop_assert!(min_eig >= -1e-8 * max_diag);
        }

        #[test]
        fn adp_is_symmetric_and_bilinear(
            (x, u) in input_strategy(2, 2),
            (x2, u2) in input_strategy(2, 2),
            alpha in -4.0..4.0f64,
        ) {
            let k = AdpKernel::new(vec![se(1.0, 0.7, 2), se(0.3, 1.3, 2), se(2.0, 0.4, 2)]).unwrap();
            let y = [1.0, u[0], u[1]];
            let y2 = [1.0, u2[0], u2[1]];
            let ab = k.eval_raw(&x, &y, &x2, &y2).unwrap();
            let ba = k.eval_raw(&x2, &y2, &x, &y).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1e-300));
            let scaled: Vec<f64> = y.iter().map(|v| alpha * v).collect();
            let s = k.eval_raw(&x, &scaled, &x2, &y2).unwrap();
            prop_assert!((s - alpha * ab).abs() <= 1e-12 * (1.0 + (alpha * ab).abs()));
        }
    }
}
