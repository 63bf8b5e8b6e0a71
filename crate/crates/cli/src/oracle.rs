//! Raw-data reference computations. They use the data points themselves,
//! never the Gram matrix, so they can check the Gram-only results.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Primal weight `Σ α_i y_i x_i`.
pub fn svm_weight(points: &[Vec<f64>], labels: &[f64], alpha: &[f64]) -> Vec<f64> {
    let d = points.first().map_or(0, Vec::len);
    let mut w = vec![0.0; d];
    for ((p, y), a) in points.iter().zip(labels).zip(alpha) {
        for (wk, pk) in w.iter_mut().zip(p) {
            *wk += a * y * pk;
        }
    }
    w
}

fn design(points: &[Vec<f64>], augmented: bool) -> DMatrix<f64> {
    let d = points[0].len();
    let cols = d + usize::from(augmented);
    DMatrix::from_fn(points.len(), cols, |i, j| if j < d { points[i][j] } else { 1.0 })
}

/// Minimum-norm least-squares weights on the raw design matrix.
pub fn least_squares(points: &[Vec<f64>], y: &[f64], augmented: bool) -> Vec<f64> {
    let x = design(points, augmented);
    let svd = x.svd(true, true);
    let cutoff = 1e-10 * svd.singular_values.max();
    svd.solve(&DVector::from_column_slice(y), cutoff)
        .expect("both factors computed")
        .iter()
        .copied()
        .collect()
}

pub fn linear_predict(w: &[f64], x: &[f64], augmented: bool) -> f64 {
    let base: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    if augmented {
        base + w[x.len()]
    } else {
        base
    }
}

/// Top-`d` eigenpairs of the scatter matrix `Σ x xᵀ`, largest first.
pub fn scatter_eigen(points: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<Vec<f64>>, DMatrix<f64>) {
    let dim = points[0].len();
    let mut a = DMatrix::zeros(dim, dim);
    for p in points {
        let v = DVector::from_column_slice(p);
        a += &v * v.transpose();
    }
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = &order[..d.min(dim)];
    (
        top.iter().map(|&k| eig.eigenvalues[k]).collect(),
        top.iter()
            .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect(),
        a,
    )
}

/// Angle between the lines spanned by `a` and `b`.
pub fn line_angle(a: &[f64], b: &[f64]) -> f64 {
    // atan2 of the orthogonal and parallel parts stays accurate near zero
    let (va, vb) = (
        DVector::from_column_slice(a).normalize(),
        DVector::from_column_slice(b).normalize(),
    );
    let along = va.dot(&vb);
    (&va - along * &vb).norm().atan2(along.abs())
}

/// Dual objective from the primal weight: `Σα − ½‖Σ α_i y_i x_i‖²`.
pub fn svm_dual_value(points: &[Vec<f64>], labels: &[f64], alpha: &[f64]) -> f64 {
    let w = svm_weight(points, labels, alpha);
    alpha.iter().sum::<f64>() - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Best dual value over a zooming grid on the feasible set, for up to three
/// points. The last variable is fixed by `Σ α_i y_i = 0`.
pub fn svm_dual_grid(points: &[Vec<f64>], labels: &[f64], radius: f64) -> f64 {
    let m = points.len();
    assert!((2..=3).contains(&m), "grid oracle handles two or three points");
    let free = m - 1;
    let steps = 40;
    let (mut lo, mut hi) = (vec![0.0; free], vec![radius; free]);
    let mut best = f64::NEG_INFINITY;
    let mut best_at = vec![0.0; free];
    for _ in 0..60 {
        for flat in 0..(steps + 1usize).pow(free as u32) {
            let mut rest = flat;
            let a: Vec<f64> = (0..free)
                .map(|k| {
                    let idx = rest % (steps + 1);
                    rest /= steps + 1;
                    lo[k] + (hi[k] - lo[k]) * idx as f64 / steps as f64
                })
                .collect();
            let last = -labels[m - 1] * a.iter().zip(labels).map(|(ai, yi)| ai * yi).sum::<f64>();
            if last < 0.0 {
                continue;
            }
            let mut full = a.clone();
            full.push(last);
            let v = svm_dual_value(points, labels, &full);
            if v > best {
                best = v;
                best_at = a;
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
