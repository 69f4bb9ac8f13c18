mod common;

use common::{random_gp, GenericGp, Se};
use gpcbf_core::gp::{ResidualDataset, ResidualGp};
use gpcbf_core::kernels::AdpKernel;
use nalgebra::{dvector, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(scale)
}

#[test]
fn matches_generic_gp_on_stacked_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=3);
        let points = rng.gen_range(0..=20);
        let g = random_gp(&mut rng, n, m, points, 2.0);
        for _ in 0..5 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.5..2.5)).collect();
            let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (mo, vo) = g.oracle.predict(&x, &u);
            let (mean, var) =
                g.gp.predict_mean_var(
                    &DVector::from_column_slice(&x),
                    &DVector::from_column_slice(&u),
                )
                .unwrap();
            let prior = g.oracle.predict(&x, &u).1.max(1.0);
            assert!(close(mean, mo, 1.0, 1e-8), "mean {mean} vs {mo}");
            assert!(close(var, vo, prior, 1e-8), "var {var} vs {vo}");
        }
    }
}

#[test]
fn empty_dataset_gives_the_prior() {
    let comps = [
        Se {
            variance: 0.7,
            lengthscales: vec![1.0, 2.0],
        },
        Se {
            variance: 0.3,
            lengthscales: vec![0.5, 1.5],
        },
    ];
    let kernel = AdpKernel::new(comps.iter().map(Se::base).collect()).unwrap();
    let gp = ResidualGp::fit(ResidualDataset::empty(2, 1, 0.1).unwrap(), kernel, 2.0).unwrap();
    let (mean, var) = gp
        .predict_mean_var(&dvector![0.3, -0.2], &dvector![2.0])
        .unwrap();
    assert_eq!(mean, 0.0);
    assert!((var - (0.7 + 4.0 * 0.3)).abs() < 1e-14);
    let (lo, hi) = gp
        .confidence_interval(&dvector![0.3, -0.2], &dvector![2.0])
        .unwrap();
    assert!((hi - 2.0 * var.sqrt()).abs() < 1e-14 && (lo + hi).abs() < 1e-14);
}

#[test]
fn generic_oracle_recovers_textbook_single_point() {
    // one observation, constant-input case: mean = k z / (k + σ²)
    let comps = vec![Se {
        variance: 1.0,
        lengthscales: vec![1.0],
    }];
    let g = GenericGp {
        comps,
        xs: vec![vec![0.0]],
        us: vec![vec![]],
        z: vec![2.0],
        noise_var: 1.0,
    };
    let (m, v) = g.predict(&[0.0], &[]);
    assert!((m - 1.0).abs() < 1e-14);
    assert!((v - 0.5).abs() < 1e-14);
}

fn case() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..=2, 1usize..=3, 1usize..=12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mean_is_affine_and_variance_quadratic_in_u((seed, n, m, pts) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gp(&mut rng, n, m, pts, 2.0);
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let p = g.gp.predict_affine(&x).unwrap();
        let ua = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
        let ub = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
        let t = rng.gen_range(-1.5..2.5);
        let mix = &ua * t + &ub * (1.0 - t);
        let lhs = p.mean(&mix);
        let rhs = t * p.mean(&ua) + (1.0 - t) * p.mean(&ub);
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        // second difference of a quadratic is constant
        let d = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let f = |s: f64| {
            let y = gpcbf_core::linalg::augment(&(&ua + &d * s));
            (y.transpose() * &p.c * &y)[0]
        };
        let s1 = f(1.0) - 2.0 * f(0.0) + f(-1.0);
        let s2 = f(2.0) - 2.0 * f(1.0) + f(0.0);
        prop_assert!((s1 - s2).abs() < 1e-9 * (1.0 + s1.abs()));
    }

    #[test]
    fn variance_is_nonnegative_and_below_prior((seed, n, m, pts) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gp(&mut rng, n, m, pts, 2.0);
        for _ in 0..5 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (_, var) = g.gp.predict_mean_var(&DVector::from_column_slice(&x), &DVector::from_column_slice(&u)).unwrap();
            let prior = GenericGp { xs: vec![], us: vec![], z: vec![], ..g.oracle.clone() }.predict(&x, &u).1;
            prop_assert!(var >= 0.0);
            prop_assert!(var <= prior * (1.0 + 1e-12) + 1e-14);
        }
    }

    #[test]
    fn adding_data_never_increases_variance((seed, n, m, pts) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gp(&mut rng, n, m, pts, 2.0);
        let ds = g.gp.dataset().clone();
        let mut more = ds.clone();
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let u = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
        more.push(&x, &u, rng.gen_range(-1.0..1.0)).unwrap();
        let bigger = ResidualGp::fit(more, g.gp.kernel().clone(), 2.0).unwrap();
        let xq = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let uq = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
        let v0 = g.gp.predict_mean_var(&xq, &uq).unwrap().1;
        let v1 = bigger.predict_mean_var(&xq, &uq).unwrap().1;
        prop_assert!(v1 <= v0 + 1e-10 * (1.0 + v0));
    }
}

#[test]
fn small_noise_interpolates_training_targets() {
    let comps = [
        Se {
            variance: 1.0,
            lengthscales: vec![0.7],
        },
        Se {
            variance: 0.5,
            lengthscales: vec![0.9],
        },
    ];
    let kernel = AdpKernel::new(comps.iter().map(Se::base).collect()).unwrap();
    let mut ds = ResidualDataset::empty(1, 1, 1e-4).unwrap();
    let pts = [(-1.0, 0.5, 0.3), (0.0, -1.0, -0.2), (1.2, 2.0, 0.9)];
    for (x, u, z) in pts {
        ds.push(&dvector![x], &dvector![u], z).unwrap();
    }
    let gp = ResidualGp::fit(ds, kernel, 2.0).unwrap();
    for (x, u, z) in pts {
        let (mean, var) = gp.predict_mean_var(&dvector![x], &dvector![u]).unwrap();
        assert!((mean - z).abs() < 1e-5, "{mean} vs {z}");
        assert!(var < 1e-6, "{var}");
    }
}

#[test]
fn dimension_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_gp(&mut rng, 2, 1, 4, 2.0);
    assert!(g.gp.predict_affine(&dvector![1.0]).is_err());
    assert!(g
        .gp
        .predict_mean_var(&dvector![1.0, 2.0], &dvector![1.0, 2.0])
        .is_err());
    let kernel = g.gp.kernel().clone();
    let ds = ResidualDataset::empty(2, 2, 0.1).unwrap();
    assert!(ResidualGp::fit(ds, kernel, 2.0).is_err());
}
