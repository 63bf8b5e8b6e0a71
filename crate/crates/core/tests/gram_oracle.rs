use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pipret::gram_ml::{
    equality_residual, kernel_row, kkt_residual, pca_gram, private_gram, regression_fit, svm_dual_train,
    FixedPointCodec, GramMatrix, LabeledGram,
};
use pipret::protocol::{FullDownload, RepeatedPir};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn raw_dual_objective(points: &[Vec<f64>], y: &[f64], alpha: &[f64]) -> f64 {
    // ‖Σ α_i y_i x_i‖² from the primal weight vector
    let d = points[0].len();
    let mut w = vec![0.0; d];
    for ((p, yi), a) in points.iter().zip(y).zip(alpha) {
        for (wk, pk) in w.iter_mut().zip(p) {
            *wk += a * yi * pk;
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Maximizes the dual over the feasible line/plane by repeated grid zooming.
fn grid_oracle(points: &[Vec<f64>], y: &[f64]) -> f64 {
    let m = points.len();
    // the last variable is fixed by Σ α y = 0
    let free = m - 1;
    let (mut lo, mut hi) = (vec![0.0; free], vec![4.0; free]);
    let mut best = f64::NEG_INFINITY;
    let mut best_at = vec![0.0; free];
    for _ in 0..60 {
        let steps = 40;
        let mut idx = vec![0usize; free];
        loop {
            let a: Vec<f64> = (0..free)
                .map(|k| lo[k] + (hi[k] - lo[k]) * idx[k] as f64 / steps as f64)
                .collect();
            let last = -y[m - 1] * a.iter().zip(y).map(|(ai, yi)| ai * yi).sum::<f64>();
            if last >= 0.0 {
                let mut full = a.clone();
                full.push(last);
                let v = raw_dual_objective(points, y, &full);
                if v > best {
                    best = v;
                    best_at = a;
                }
            }
            let mut k = 0;
            while k < free {
                idx[k] += 1;
                if idx[k] <= steps {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == free {
                break;
            }
        }
        for k in 0..free {
            let width = (hi[k] - lo[k]) / 4.0;
            lo[k] = (best_at[k] - width).max(0.0);
            hi[k] = best_at[k] + width;
        }
    }
    best
}

#[test]
fn svm_matches_grid_oracle() {
    let cases: Vec<(Vec<Vec<f64>>, Vec<f64>)> = vec![
        (vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1.0, -1.0]),
        (vec![vec![2.0, 1.0], vec![0.0, -1.0]], vec![1.0, -1.0]),
        (
            vec![vec![1.0, 1.0], vec![2.0, 0.5], vec![-1.0, -0.5]],
            vec![1.0, 1.0, -1.0],
        ),
        (
            vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]],
            vec![1.0, -1.0, -1.0],
        ),
    ];
    for (points, y) in cases {
        let lg = LabeledGram::new(GramMatrix::from_points(&points).unwrap(), y.clone()).unwrap();
        let sol = svm_dual_train(&lg, None).unwrap();
        let oracle = grid_oracle(&points, &y);
        assert!((sol.objective - oracle).abs() < 1e-6, "{} vs {oracle}", sol.objective);
        assert!((raw_dual_objective(&points, &y, &sol.alpha) - sol.objective).abs() < 1e-9);
    }
}

fn separable_set(seed: u64, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (w, b) = ([0.8, -0.6], 0.3);
    let (mut points, mut labels) = (Vec::new(), Vec::new());
    while points.len() < m {
        let p = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let s: f64 = w[0] * p[0] + w[1] * p[1] + b;
        if s.abs() < 0.25 {
            continue;
        }
        labels.push(s.signum());
        points.push(p);
    }
    (points, labels)
}

#[test]
fn svm_certificate_on_twenty_points() {
    for seed in 0..5 {
        let (points, y) = separable_set(seed, 20);
        let lg = LabeledGram::new(GramMatrix::from_points(&points).unwrap(), y.clone()).unwrap();
        let sol = svm_dual_train(&lg, None).unwrap();
        assert!(kkt_residual(&lg, &sol) < 1e-6);
        assert!(equality_residual(&lg, &sol) < 1e-10);
        assert!(sol.alpha.iter().all(|&a| a >= 0.0));
        // primal weight from raw data gives the same predictions
        let mut w = [0.0; 2];
        for ((p, yi), a) in points.iter().zip(&y).zip(&sol.alpha) {
            w[0] += a * yi * p[0];
            w[1] += a * yi * p[1];
        }
        let mut rng = ChaCha20Rng::seed_from_u64(100 + seed);
        for _ in 0..50 {
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let raw = w[0] * x[0] + w[1] * x[1] + sol.bias;
            let gram_only = sol.decision(&y, &kernel_row(&points, &x));
            assert!((raw - gram_only).abs() < 1e-6);
        }
        for (p, yi) in points.iter().zip(&y) {
            assert!(yi * (w[0] * p[0] + w[1] * p[1] + sol.bias) >= 1.0 - 1e-6);
        }
    }
}

/// Least squares on the raw augmented design through an SVD.
fn raw_least_squares(points: &[Vec<f64>], y: &[f64]) -> DVector<f64> {
    let d = points[0].len();
    let x = DMatrix::from_fn(points.len(), d + 1, |i, j| if j < d { points[i][j] } else { 1.0 });
    x.svd(true, true).solve(&DVector::from_column_slice(y), 1e-12).unwrap()
}

#[test]
fn regression_with_duplicates_matches_least_squares() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut points: Vec<Vec<f64>> = (0..6)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    points.push(points[0].clone());
    points.push(points[3].clone());
    let y: Vec<f64> = (0..points.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = GramMatrix::from_points(&points).unwrap().augmented();
    let fit = regression_fit(&g, &y).unwrap();
    assert_eq!(fit.rank, 3);
    let w = raw_least_squares(&points, &y);
    let raw_residual: f64 = points
        .iter()
        .zip(&y)
        .map(|(p, yi)| (w[0] * p[0] + w[1] * p[1] + w[2] - yi).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(
        (fit.residual - raw_residual).abs() < 1e-8,
        "{} vs {raw_residual}",
        fit.residual
    );
    for _ in 0..20 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let row: Vec<f64> = kernel_row(&points, &x).iter().map(|k| k + 1.0).collect();
        let raw = w[0] * x[0] + w[1] * x[1] + w[2];
        assert!((fit.predict(&row) - raw).abs() < 1e-6);
    }
    // minimum norm: coefficients lie in the row space, so duplicates share weight equally
    assert!((fit.coefficients[0] - fit.coefficients[6]).abs() < 1e-8);
}

#[test]
fn pca_lifts_to_data_space_eigenvectors() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let points: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let a = points.iter().fold(DMatrix::<f64>::zeros(3, 3), |acc, p| {
        let v = DVector::from_column_slice(p);
        acc + &v * v.transpose()
    });
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let g = GramMatrix::from_points(&points).unwrap();
    let pca = pca_gram(&g, 3).unwrap();
    assert!(pca_gram(&g, 4).is_err());
    let lifted = pca.lift(&points);
    for (r, dir) in lifted.iter().enumerate() {
        let v = DVector::from_column_slice(dir);
        assert!((v.norm() - 1.0).abs() < 1e-9);
        let truth = eig.eigenvectors.column(order[r]);
        let cos = v.dot(&truth).abs().min(1.0);
        assert!(cos.acos() < 1e-6, "direction {r}: angle {}", cos.acos());
        assert!((pca.eigenvalues[r] - eig.eigenvalues[order[r]]).abs() < 1e-9);
        let residual = (&a * &v - pca.eigenvalues[r] * &v).norm();
        assert!(residual <= 1e-8 * a.norm());
        // projection energy along the direction equals λ from raw data too
        let energy: f64 = points
            .iter()
            .map(|p| pca.project(&kernel_row(&points, p))[r].powi(2))
            .sum();
        let raw_energy: f64 = points
            .iter()
            .map(|p| DVector::from_column_slice(p).dot(&truth).powi(2))
            .sum();
        assert!((energy - raw_energy).abs() < 1e-6);
    }
}

#[test]
fn private_pipeline_is_bit_identical() {
    let codec = FixedPointCodec::new(100.0, 1_000_000_007, 3.0).unwrap();
    let (points, y) = separable_set(3, 6);
    let direct = codec.quantized_gram(&points).unwrap();
    let pg = private_gram(&points, &codec, &FullDownload, 2, 1).unwrap();
    assert_eq!(pg.integer_gram, codec.integer_gram(&points));
    assert!(pg
        .gram
        .matrix()
        .iter()
        .zip(direct.matrix().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    let a = svm_dual_train(&LabeledGram::new(pg.gram, y.clone()).unwrap(), None).unwrap();
    let b = svm_dual_train(&LabeledGram::new(direct, y).unwrap(), None).unwrap();
    assert_eq!(a, b);

    let small = &points[..2];
    let pg = private_gram(small, &codec, &RepeatedPir::new(), 2, 1).unwrap();
    assert_eq!(pg.integer_gram, codec.integer_gram(small));
}

mod properties {
    use super::*;
    use pipret::field::compute_table;
    use pipret::gram_ml::{decode_gram, encode_dataset};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig, Strategy};

    fn points(m: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), m)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gram_is_symmetric_psd(pts in points(6, 3)) {
            let g = GramMatrix::from_points(&pts).unwrap();
            let m = g.matrix();
            prop_assert_eq!(m, &m.transpose());
            let eig = SymmetricEigen::new(m.clone());
            let top = eig.eigenvalues.max().max(0.0);
            prop_assert!(eig.eigenvalues.min() >= -1e-8 * top.max(1.0));
        }

        #[test]
        fn codec_round_trip_is_exact(pts in points(4, 3), scale in 1.0f64..1000.0) {
            let codec = FixedPointCodec::new(scale.round(), 2_305_843_009_213_693_951, 5.0).unwrap();
            let db = encode_dataset(&pts, &codec).unwrap();
            let decoded = decode_gram(&compute_table(&db), &codec).unwrap();
            prop_assert_eq!(decoded, codec.quantized_gram(&pts).unwrap());
        }

        #[test]
        fn regression_predictions_need_only_inner_products(pts in points(7, 2), y in proptest::collection::vec(-3.0f64..3.0, 7)) {
            let g = GramMatrix::from_points(&pts).unwrap().augmented();
            let fit = regression_fit(&g, &y).unwrap();
            // the Gram-side fit is the raw least-squares fit, so its residual
            // is orthogonal to the columns of the augmented data
            let preds: Vec<f64> = pts
                .iter()
                .map(|x| fit.predict(&kernel_row(&pts, x).iter().map(|k| k + 1.0).collect::<Vec<_>>()))
                .collect();
            let r: Vec<f64> = preds.iter().zip(&y).map(|(p, t)| p - t).collect();
            let scale = 1.0 + y.iter().map(|v| v.abs()).sum::<f64>();
            prop_assert!(r.iter().sum::<f64>().abs() < 1e-6 * scale);
            for j in 0..2 {
                let dot: f64 = r.iter().zip(&pts).map(|(ri, p)| ri * p[j]).sum();
                prop_assert!(dot.abs() < 1e-6 * scale * 5.0);
            }
        }

        #[test]
        fn svm_certificate_on_separable_draws(seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut pts = Vec::new();
            let mut y = Vec::new();
            while pts.len() < 12 {
                let p = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let s: f64 = p[0] - 0.5 * p[1] + 0.2;
                if s.abs() > 0.3 {
                    y.push(s.signum());
                    pts.push(p);
                }
            }
            prop_assume!(y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0));
            let lg = LabeledGram::new(GramMatrix::from_points(&pts).unwrap(), y).unwrap();
            let sol = svm_dual_train(&lg, None).unwrap();
            prop_assert!(kkt_residual(&lg, &sol) < 1e-6);
            prop_assert!(equality_residual(&lg, &sol) < 1e-10);
            prop_assert!(sol.alpha.iter().all(|&a| a >= 0.0));
        }
    }
}
