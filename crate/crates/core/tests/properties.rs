use fedadmm::analysis::{lagrangian, should_stop, stopping_threshold, ResidualTriple};
use fedadmm::data::{partition_indices, Federation};
use fedadmm::fedcore::{aggregate, dual_update, in_schedule, rounds_after, ClientState};
use fedadmm::linalg::{lambda_max, spd_solve};
use fedadmm::losses::{
    curvature_matrix, lipschitz_constant, loss_gradient, loss_hessian, loss_value, CurvatureMode,
    LossModel,
};
use fedadmm::{DenseMatrix, DenseVector};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |v| DenseMatrix::from_row_major(rows, cols, v).unwrap())
}

fn vector(n: usize, scale: f64) -> impl Strategy<Value = DenseVector> {
    prop::collection::vec(-scale..scale, n).prop_map(DenseVector::from_vec)
}

/// Neumaier-compensated sum.
fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() {
            (s - t) + v
        } else {
            (v - t) + s
        };
        s = t;
    }
    s + c
}

fn dataset(a: DenseMatrix, b: Vec<f64>) -> fedadmm::data::ClientDataset {
    Federation::from_parts(vec![(a, DenseVector::from_vec(b))])
        .unwrap()
        .clients()[0]
        .clone()
}

fn logistic_case() -> impl Strategy<Value = (DenseMatrix, Vec<f64>, DenseVector, DenseVector)> {
    (
        matrix(10, 4),
        prop::collection::vec(prop::bool::ANY, 10),
        vector(4, 3.0),
        vector(4, 3.0),
    )
        .prop_map(|(a, b, x, z)| (a, b.into_iter().map(f64::from).collect(), x, z))
}

fn regression_case() -> impl Strategy<Value = (DenseMatrix, Vec<f64>, DenseVector, DenseVector)> {
    (
        matrix(10, 4),
        prop::collection::vec(-5.0..5.0f64, 10),
        vector(4, 3.0),
        vector(4, 3.0),
    )
}

fn clients(m: usize, n: usize) -> impl Strategy<Value = Vec<ClientState>> {
    prop::collection::vec((vector(n, 10.0), vector(n, 10.0), 0.1..50.0f64), m).prop_map(move |cs| {
        cs.into_iter()
            .map(|(x, pi, s)| ClientState::new(x, pi, DenseVector::zeros(n), s).unwrap())
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spd_solve_matches_cholesky_oracle(b in matrix(6, 6), v in vector(6, 5.0)) {
        let m = b.gram().add_diag(0.5);
        let u = spd_solve(&m, &v).unwrap();
        let expect = to_na(&m).cholesky().unwrap().solve(&DVector::from_column_slice(v.as_slice()));
        for (got, want) in u.iter().zip(expect.iter()) {
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn lambda_max_brackets_spectrum(b in matrix(12, 5), probe in vector(5, 1.0)) {
        let m = b.gram();
        let top = lambda_max(&m).unwrap();
        let exact = to_na(&m).symmetric_eigen().eigenvalues.max();
        prop_assert!(top <= exact * (1.0 + 1e-12) + 1e-12);
        prop_assert!(top >= exact * (1.0 - 1e-6));
        let pn = probe.norm_sq();
        if pn > 1e-12 {
            prop_assert!(m.quad_form(&probe).unwrap() / pn <= top * (1.0 + 1e-6) + 1e-12);
        }
    }

    #[test]
    fn least_squares_smoothness_bound((a, b, x, z) in regression_case()) {
        check_smoothness(&LossModel::LeastSquares, a, b, &x, &z)?;
    }

    #[test]
    fn logistic_smoothness_bound((a, b, x, z) in logistic_case()) {
        check_smoothness(&LossModel::logistic(0.1).unwrap(), a, b, &x, &z)?;
    }

    #[test]
    fn lipschitz_curvature_majorizes_hessian((a, b, x, _) in logistic_case(), r in 4.2..20.0f64) {
        let model = LossModel::logistic(0.1).unwrap();
        let data = dataset(a, b);
        let hess = to_na(&loss_hessian(&model, &data, &x).unwrap());
        let scalar = to_na(&curvature_matrix(&model, &data, CurvatureMode::ScalarLipschitz).unwrap());
        let scale = scalar.amax().max(1.0);
        prop_assert!((&scalar - &hess).symmetric_eigen().eigenvalues.min() >= -1e-9 * scale);

        let scaled = to_na(&curvature_matrix(&model, &data, CurvatureMode::ScaledGram { r }).unwrap());
        let spectrum = scaled.clone().symmetric_eigen().eigenvalues;
        prop_assert!(spectrum.min() >= -1e-9 * scale);
        prop_assert!((&scalar - &scaled).symmetric_eigen().eigenvalues.min() >= -1e-9 * scale);
    }

    #[test]
    fn partition_is_a_cover(d in 1usize..200, m in 1usize..40, seed in any::<u64>()) {
        match partition_indices(d, m, seed) {
            Ok(parts) => {
                prop_assert!(m <= d);
                prop_assert_eq!(parts.len(), m);
                prop_assert!(parts.iter().all(|p| !p.is_empty()));
                let mut all: Vec<usize> = parts.concat();
                all.sort_unstable();
                prop_assert_eq!(all, (0..d).collect::<Vec<_>>());
                prop_assert_eq!(&parts, &partition_indices(d, m, seed).unwrap());
            }
            Err(_) => prop_assert!(m > d),
        }
    }

    #[test]
    fn should_stop_is_monotone_in_tolerance(
        dual in 0.0..1.0f64, primal in 0.0..1.0f64, consensus in 0.0..1.0f64,
        lo in 1e-9..1e-3f64, factor in 1.0..100.0f64, n in 1usize..50, d in 1usize..500,
    ) {
        let res = ResidualTriple { dual, primal, consensus };
        if should_stop(&res, n, d, lo) {
            prop_assert!(should_stop(&res, n, d, lo * factor));
        }
        let at = ResidualTriple { dual: stopping_threshold(n, d, lo), primal: 0.0, consensus: 0.0 };
        prop_assert!(should_stop(&at, n, d, lo));
    }

    #[test]
    fn aggregate_matches_compensated_oracle(cs in clients(7, 4), rot in 0usize..7) {
        let y = aggregate(&cs).unwrap();
        let sigma = exact_sum(cs.iter().map(|c| c.sigma));
        for j in 0..4 {
            let want = exact_sum(cs.iter().flat_map(|c| [c.sigma * c.x[j], c.pi[j]])) / sigma;
            prop_assert!((y[j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        let mut rotated = cs.clone();
        rotated.rotate_left(rot);
        let z = aggregate(&rotated).unwrap();
        for j in 0..4 {
            prop_assert!((y[j] - z[j]).abs() <= 1e-12 * (1.0 + y[j].abs()));
        }
    }

    #[test]
    fn dual_update_is_exact(cs in clients(1, 5), y in vector(5, 10.0)) {
        let c = &cs[0];
        let pi = dual_update(c, &y).unwrap();
        for j in 0..5 {
            let want = c.pi[j] + c.sigma * (c.x[j] - y[j]);
            prop_assert!((pi[j] - want).abs() <= 1e-13 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn lagrangian_matches_oracle(parts in prop::collection::vec((matrix(6, 3), vector(6, 4.0)), 3), cs in clients(3, 3), y in vector(3, 5.0)) {
        let fed = Federation::from_parts(parts).unwrap();
        let got = lagrangian(&fed, &LossModel::LeastSquares, &cs, &y).unwrap();
        let terms = cs.iter().zip(fed.clients()).flat_map(|(c, data)| {
            let a = to_na(&data.features);
            let x = DVector::from_column_slice(c.x.as_slice());
            let resid = &a * &x - DVector::from_column_slice(data.targets.as_slice());
            let d = &x - DVector::from_column_slice(y.as_slice());
            let pi = DVector::from_column_slice(c.pi.as_slice());
            [0.5 * data.weight * resid.norm_squared(), d.dot(&pi), 0.5 * c.sigma * d.norm_squared()]
        });
        let want = exact_sum(terms.collect::<Vec<_>>());
        prop_assert!((got - want).abs() <= 1e-10 * (1.0 + want.abs()));
    }

    #[test]
    fn rounds_count_schedule(iters in 0usize..500, k0 in 1usize..40) {
        let counted = (0..iters).filter(|&k| in_schedule(k, k0)).count();
        prop_assert_eq!(rounds_after(iters, k0), counted);
    }
}

fn check_smoothness(
    model: &LossModel,
    a: DenseMatrix,
    b: Vec<f64>,
    x: &DenseVector,
    z: &DenseVector,
) -> Result<(), TestCaseError> {
    let data = dataset(a, b);
    let r = lipschitz_constant(model, &data).unwrap();
    let fx = loss_value(model, &data, x).unwrap();
    let fz = loss_value(model, &data, z).unwrap();
    let g = loss_gradient(model, &data, x).unwrap();
    let d = z.sub(x);
    let bound = fx + g.dot(&d) + 0.5 * r * d.norm_sq();
    prop_assert!(fz <= bound + 1e-9 * (1.0 + fz.abs()), "{fz} > {bound}");
    Ok(())
}
