//! Learning from inner products alone: a hard-margin SVM dual solver,
//! least-squares regression and PCA, all driven by the Gram matrix, plus a
//! fixed-point codec that moves real data into `F(q)` and back so the Gram
//! matrix can come out of the retrieval simulator.

use std::io::Read;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{
    pair_count, pair_unrank, random_database, Database, FieldError, InnerProductVector, Modulus, PairSet,
};
use crate::protocol::{run_pair_retrieval, ProtocolError, RetrievalScheme, RetrievalTranscript};

/// Relative tolerance for the positive-semidefinite check.
pub const PSD_TOL: f64 = 1e-8;
/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RANK_CUTOFF: f64 = 1e-10;
/// Dual variables above this are support vectors.
pub const SUPPORT_TOL: f64 = 1e-8;
/// Stop once the maximal KKT violation falls below this.
pub const KKT_TOL: f64 = 1e-8;
pub const MAX_PAIR_UPDATES: usize = 100_000;
/// Dual variables beyond this mean the data is not separable.
const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Gram matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("Gram matrix is not symmetric (|G[{i}][{j}] - G[{j}][{i}]| = {gap:e})")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("Gram matrix is not positive semidefinite (smallest eigenvalue {min:e}, largest {max:e})")]
    NotPsd { min: f64, max: f64 },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("empty input")]
    Empty,
    #[error("SVM labels must be -1 or +1, found {0}")]
    InvalidLabel(f64),
    #[error("no support vector: the equality constraint forces every dual variable to zero")]
    NoSupportVector,
    #[error("SVM solver did not converge within {updates} pair updates (violation {violation:e})")]
    NoConvergence { updates: usize, violation: f64 },
    #[error("box constraint must be positive, got {0}")]
    InvalidBox(f64),
    #[error("requested {requested} components but numerical rank is {rank}")]
    RankExceeded { requested: usize, rank: usize },
    #[error("invalid codec: {0}")]
    InvalidCodec(String),
    #[error("value {value} exceeds codec bound {max_abs}")]
    ValueOutOfRange { value: f64, max_abs: f64 },
    #[error("wraparound bound violated: m·L·r² = {bound} must be below q/2 = {half}")]
    Wraparound { bound: u128, half: u128 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Symmetric PSD matrix of pairwise inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    pub fn new(g: DMatrix<f64>) -> Result<Self, MlError> {
        let (rows, cols) = g.shape();
        if rows != cols {
            return Err(MlError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(MlError::Empty);
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MlError::NonFinite);
        }
        let scale = g.amax().max(1.0);
        for i in 0..rows {
            for j in 0..i {
                let gap = (g[(i, j)] - g[(j, i)]).abs();
                if gap > 1e-12 * scale {
                    return Err(MlError::NotSymmetric { i, j, gap });
                }
            }
        }
        let eig = SymmetricEigen::new(g.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if min < -PSD_TOL * max.abs().max(f64::MIN_POSITIVE) {
            return Err(MlError::NotPsd { min, max });
        }
        Ok(Self(g))
    }

    /// Inner products of the given points, computed in parallel over pairs.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self, MlError> {
        let m = points.len();
        check_points(points)?;
        let upper: Vec<(usize, usize, f64)> = (0..m)
            .flat_map(|i| (i..m).map(move |j| (i, j)))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(i, j)| (i, j, dot(&points[i], &points[j])))
            .collect();
        let mut g = DMatrix::zeros(m, m);
        for (i, j, v) in upper {
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
        Self::new(g)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    /// Gram of the points with a constant 1 appended: `G + 1·1ᵀ`.
    pub fn augmented(&self) -> Self {
        Self(self.0.add_scalar(1.0))
    }
}

fn check_points(points: &[Vec<f64>]) -> Result<usize, MlError> {
    let d = points.first().ok_or(MlError::Empty)?.len();
    for p in points {
        if p.len() != d {
            return Err(MlError::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(MlError::NonFinite);
        }
    }
    Ok(d)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inner products of `x` with each training point; all that prediction needs.
pub fn kernel_row(points: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    points.iter().map(|p| dot(p, x)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGram {
    gram: GramMatrix,
    labels: Vec<f64>,
}

impl LabeledGram {
    pub fn new(gram: GramMatrix, labels: Vec<f64>) -> Result<Self, MlError> {
        if labels.len() != gram.size() {
            return Err(MlError::DimensionMismatch {
                expected: gram.size(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|v| !v.is_finite()) {
            return Err(MlError::NonFinite);
        }
        Ok(Self { gram, labels })
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub updates: usize,
    /// Largest KKT violation `max_up(-y∇) - min_low(-y∇)` at exit.
    pub violation: f64,
    pub box_cap: Option<f64>,
}

impl DualSolution {
    /// `f(x) = Σ α_i y_i ⟨x_i, x⟩ + b`, from the kernel row of `x`.
    pub fn decision(&self, labels: &[f64], kernel_row: &[f64]) -> f64 {
        self.alpha
            .iter()
            .zip(labels)
            .zip(kernel_row)
            .map(|((a, y), k)| a * y * k)
            .sum::<f64>()
            + self.bias
    }

    pub fn support_vectors(&self) -> Vec<usize> {
        (0..self.alpha.len()).filter(|&i| self.alpha[i] > SUPPORT_TOL).collect()
    }
}

/// Maximizes `Σα − ½ Σ α_i α_j y_i y_j G_ij` subject to `α ≥ 0` (and
/// `α ≤ box_cap` when given) and `Σ α_i y_i = 0`, by two-variable updates on
/// the maximal violating pair.
pub fn svm_dual_train(lg: &LabeledGram, box_cap: Option<f64>) -> Result<DualSolution, MlError> {
    let g = lg.gram.matrix();
    let y = &lg.labels;
    let m = y.len();
    if let Some(&bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(MlError::InvalidLabel(bad));
    }
    if let Some(c) = box_cap {
        if !(c > 0.0 && c.is_finite()) {
            return Err(MlError::InvalidBox(c));
        }
    }
    let cap = box_cap.unwrap_or(f64::INFINITY);
    let q = |i: usize, j: usize| y[i] * y[j] * g[(i, j)];
    let mut alpha = vec![0.0; m];
    // gradient of the minimization form ½αᵀQα − Σα
    let mut grad = vec![-1.0; m];
    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < cap) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < cap);
    let mut updates = 0;
    let violation = loop {
        let mut best_up = None;
        let mut best_low = None;
        for t in 0..m {
            let score = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && best_up.is_none_or(|(_, s)| score > s) {
                best_up = Some((t, score));
            }
            if in_low(alpha[t], y[t]) && best_low.is_none_or(|(_, s)| score < s) {
                best_low = Some((t, score));
            }
        }
        let (Some((i, hi)), Some((j, lo))) = (best_up, best_low) else {
            break 0.0;
        };
        let gap = hi - lo;
        if gap < KKT_TOL {
            break gap.max(0.0);
        }
        if updates == MAX_PAIR_UPDATES {
            return Err(MlError::NoConvergence {
                updates,
                violation: gap,
            });
        }
        updates += 1;
        // move along α_i += y_i t, α_j -= y_j t, which keeps Σ α y fixed
        let curvature = (g[(i, i)] + g[(j, j)] - 2.0 * g[(i, j)]).max(1e-12);
        let mut step = gap / curvature;
        step = step.min(if y[i] > 0.0 { cap - alpha[i] } else { alpha[i] });
        step = step.min(if y[j] > 0.0 { alpha[j] } else { cap - alpha[j] });
        let (di, dj) = (y[i] * step, -y[j] * step);
        alpha[i] += di;
        alpha[j] += dj;
        if alpha[i].abs() > DIVERGENCE_LIMIT || alpha[j].abs() > DIVERGENCE_LIMIT {
            return Err(MlError::NoConvergence {
                updates,
                violation: gap,
            });
        }
        for (t, gt) in grad.iter_mut().enumerate() {
            *gt += q(t, i) * di + q(t, j) * dj;
        }
    };
    let support: Vec<usize> = (0..m).filter(|&i| alpha[i] > SUPPORT_TOL).collect();
    if support.is_empty() {
        return Err(MlError::NoSupportVector);
    }
    // prefer margin vectors strictly inside the box for the bias
    let free: Vec<usize> = support
        .iter()
        .copied()
        .filter(|&i| alpha[i] < cap - SUPPORT_TOL)
        .collect();
    let basis = if free.is_empty() { &support } else { &free };
    let bias = basis
        .iter()
        .map(|&i| y[i] - (0..m).map(|j| alpha[j] * y[j] * g[(j, i)]).sum::<f64>())
        .sum::<f64>()
        / basis.len() as f64;
    let quad: f64 = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| alpha[i] * alpha[j] * q(i, j))
        .sum();
    let objective = alpha.iter().sum::<f64>() - 0.5 * quad;
    Ok(DualSolution {
        alpha,
        bias,
        objective,
        updates,
        violation,
        box_cap,
    })
}

/// Largest violation of the margin conditions over the training set.
pub fn kkt_residual(lg: &LabeledGram, sol: &DualSolution) -> f64 {
    let g = lg.gram.matrix();
    let y = &lg.labels;
    let cap = sol.box_cap.unwrap_or(f64::INFINITY);
    (0..y.len())
        .map(|i| {
            let row: Vec<f64> = g.row(i).iter().copied().collect();
            let margin = y[i] * sol.decision(y, &row);
            let a = sol.alpha[i];
            if a <= SUPPORT_TOL {
                (1.0 - margin).max(0.0)
            } else if a >= cap - SUPPORT_TOL {
                (margin - 1.0).max(0.0)
            } else {
                (margin - 1.0).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Absolute value of `Σ α_i y_i`.
pub fn equality_residual(lg: &LabeledGram, sol: &DualSolution) -> f64 {
    sol.alpha.iter().zip(&lg.labels).map(|(a, y)| a * y).sum::<f64>().abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    /// `a = G⁺ y`; predictions are `Σ a_i ⟨x_i, x⟩`.
    pub coefficients: Vec<f64>,
    pub rank: usize,
    /// `‖G a − y‖₂`.
    pub residual: f64,
}

impl RegressionFit {
    pub fn predict(&self, kernel_row: &[f64]) -> f64 {
        dot(&self.coefficients, kernel_row)
    }
}

/// Minimum-norm solution of `G a = y` through the pseudo-inverse.
pub fn regression_fit(g: &GramMatrix, y: &[f64]) -> Result<RegressionFit, MlError> {
    let m = g.size();
    if y.len() != m {
        return Err(MlError::DimensionMismatch {
            expected: m,
            got: y.len(),
        });
    }
    let eig = SymmetricEigen::new(g.matrix().clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let cutoff = RANK_CUTOFF * lmax;
    let yv = DVector::from_column_slice(y);
    let proj = eig.eigenvectors.transpose() * &yv;
    let mut rank = 0;
    let mut scaled = DVector::zeros(m);
    for k in 0..m {
        let lambda = eig.eigenvalues[k];
        if lambda > cutoff && lambda > 0.0 {
            scaled[k] = proj[k] / lambda;
            rank += 1;
        }
    }
    let a = &eig.eigenvectors * scaled;
    let residual = (g.matrix() * &a - &yv).norm();
    Ok(RegressionFit {
        coefficients: a.iter().copied().collect(),
        rank,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaComponents {
    /// Eigenvalues of `G`, largest first.
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors `u_r` of `G`; the data-space direction is `X u_r / √λ_r`.
    pub coefficients: Vec<Vec<f64>>,
    pub rank: usize,
}

impl PcaComponents {
    /// Coordinates of a point along each direction, from its kernel row.
    pub fn project(&self, kernel_row: &[f64]) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(&self.eigenvalues)
            .map(|(u, l)| dot(u, kernel_row) / l.sqrt())
            .collect()
    }

    /// Data-space directions, for callers that hold the raw points.
    pub fn lift(&self, points: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = points.first().map_or(0, Vec::len);
        self.coefficients
            .iter()
            .zip(&self.eigenvalues)
            .map(|(u, l)| {
                let mut v = vec![0.0; d];
                for (p, ui) in points.iter().zip(u) {
                    for (vk, pk) in v.iter_mut().zip(p) {
                        *vk += ui * pk;
                    }
                }
                v.iter().map(|x| x / l.sqrt()).collect()
            })
            .collect()
    }
}

/// Top-`d` eigenpairs of the Gram matrix.
pub fn pca_gram(g: &GramMatrix, d: usize) -> Result<PcaComponents, MlError> {
    let eig = SymmetricEigen::new(g.matrix().clone());
    let mut order: Vec<usize> = (0..g.size()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&k| eig.eigenvalues[k] > RANK_CUTOFF * lmax && eig.eigenvalues[k] > 0.0)
        .count();
    if d == 0 || d > rank {
        return Err(MlError::RankExceeded { requested: d, rank });
    }
    let take = &order[..d];
    Ok(PcaComponents {
        eigenvalues: take.iter().map(|&k| eig.eigenvalues[k]).collect(),
        coefficients: take
            .iter()
            .map(|&k| {
                let col = eig.eigenvectors.column(k);
                // fix the sign so the largest-magnitude entry is positive
                let pivot = col
                    .iter()
                    .copied()
                    .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
                let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
                col.iter().map(|v| sign * v).collect()
            })
            .collect(),
        rank,
    })
}

/// Real values to field elements by `round(s·x) mod q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    pub scale: f64,
    pub modulus: Modulus,
    pub max_abs: f64,
}

impl FixedPointCodec {
    pub fn new(scale: f64, q: u64, max_abs: f64) -> Result<Self, MlError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(MlError::InvalidCodec(format!("scale must be positive, got {scale}")));
        }
        if !(max_abs >= 0.0 && max_abs.is_finite()) {
            return Err(MlError::InvalidCodec(format!(
                "max_abs must be non-negative, got {max_abs}"
            )));
        }
        if (scale * max_abs).round() > i64::MAX as f64 {
            return Err(MlError::InvalidCodec("scaled bound overflows".into()));
        }
        Ok(Self {
            scale,
            modulus: Modulus::new(q)?,
            max_abs,
        })
    }

    fn quantize(&self, x: f64) -> i64 {
        (self.scale * x).round() as i64
    }

    /// Rejects `m` points of dimension `length` whose integer inner products
    /// could wrap around.
    pub fn check_bound(&self, points: usize, length: usize) -> Result<(), MlError> {
        let r = (self.scale * self.max_abs).round() as u128;
        let half = u128::from(self.modulus.get()) / 2;
        let bound = (points as u128)
            .checked_mul(length as u128)
            .and_then(|v| v.checked_mul(r))
            .and_then(|v| v.checked_mul(r))
            .unwrap_or(u128::MAX);
        // strict `bound < q/2` for odd q is `2·bound < q`
        if bound.saturating_mul(2) >= u128::from(self.modulus.get()) {
            return Err(MlError::Wraparound { bound, half });
        }
        Ok(())
    }

    /// Exact integer Gram of the quantized points, without the field.
    pub fn integer_gram(&self, points: &[Vec<f64>]) -> Vec<Vec<i128>> {
        let ints: Vec<Vec<i128>> = points
            .iter()
            .map(|p| p.iter().map(|&x| i128::from(self.quantize(x))).collect())
            .collect();
        ints.iter()
            .map(|a| ints.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
            .collect()
    }

    /// Real Gram of the quantized points computed directly.
    pub fn quantized_gram(&self, points: &[Vec<f64>]) -> Result<GramMatrix, MlError> {
        let ints = self.integer_gram(points);
        let m = ints.len();
        let s2 = self.scale * self.scale;
        GramMatrix::new(DMatrix::from_fn(m, m, |i, j| ints[i][j] as f64 / s2))
    }
}

/// One file per point, one field symbol per coordinate.
pub fn encode_dataset(points: &[Vec<f64>], codec: &FixedPointCodec) -> Result<Database, MlError> {
    let length = check_points(points)?;
    codec.check_bound(points.len(), length)?;
    let rows = points
        .iter()
        .map(|p| {
            p.iter()
                .map(|&x| {
                    if x.abs() > codec.max_abs {
                        return Err(MlError::ValueOutOfRange {
                            value: x,
                            max_abs: codec.max_abs,
                        });
                    }
                    Ok(codec.modulus.reduce_signed(i128::from(codec.quantize(x))))
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<u64>>, _>>()?;
    Ok(Database::from_rows(codec.modulus.get(), rows)?)
}

/// Center-lifts each entry to the exact integer inner product.
pub fn decode_integer_gram(table: &InnerProductVector, codec: &FixedPointCodec) -> Result<Vec<Vec<i128>>, MlError> {
    if table.modulus() != codec.modulus {
        return Err(FieldError::ModulusMismatch {
            left: table.modulus().get(),
            right: codec.modulus.get(),
        }
        .into());
    }
    let m = table.files();
    let mut out = vec![vec![0i128; m]; m];
    for (r, &v) in table.values().iter().enumerate() {
        let pair = pair_unrank(m, r)?;
        let z = codec.modulus.center_lift(v);
        out[pair.first() - 1][pair.second() - 1] = z;
        out[pair.second() - 1][pair.first() - 1] = z;
    }
    Ok(out)
}

pub fn decode_gram(table: &InnerProductVector, codec: &FixedPointCodec) -> Result<GramMatrix, MlError> {
    let ints = decode_integer_gram(table, codec)?;
    let m = ints.len();
    let s2 = codec.scale * codec.scale;
    GramMatrix::new(DMatrix::from_fn(m, m, |i, j| ints[i][j] as f64 / s2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivateGram {
    pub gram: GramMatrix,
    pub integer_gram: Vec<Vec<i128>>,
    pub transcript: RetrievalTranscript,
}

/// Encodes the points, retrieves the whole inner-product table through the
/// scheme, and decodes the Gram matrix.
///
/// The real database is instance 0. Schemes that need more instances (the
/// repeated scheme needs `N^T`) get independent random cover instances.
pub fn private_gram(
    points: &[Vec<f64>],
    codec: &FixedPointCodec,
    scheme: &dyn RetrievalScheme,
    servers: usize,
    seed: u64,
) -> Result<PrivateGram, MlError> {
    let db = encode_dataset(points, codec)?;
    let m = db.files();
    let t = pair_count(m);
    let nu = scheme
        .native_subpacketization(t, servers)
        .ok_or_else(|| ProtocolError::Unsupported {
            scheme: scheme.name().into(),
            reason: format!("subpacketization for T = {t} exceeds the limit"),
        })?;
    let mut dbs = Vec::with_capacity(nu);
    dbs.push(db.clone());
    for s in 1..nu {
        dbs.push(random_database(
            codec.modulus.get(),
            m,
            db.length(),
            seed ^ (s as u64).rotate_left(32),
        )?);
    }
    let all = PairSet::from_ranks(m, 0..t)?;
    let transcript = run_pair_retrieval(scheme, &dbs, servers, &all, seed)?;
    let values = transcript.decoded.iter().map(|file| file[0]).collect();
    let table = InnerProductVector::new(codec.modulus, m, values)?;
    Ok(PrivateGram {
        gram: decode_gram(&table, codec)?,
        integer_gram: decode_integer_gram(&table, codec)?,
        transcript,
    })
}

/// Numeric table with a header row; one column may be designated as labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub points: Vec<Vec<f64>>,
    pub label_name: Option<String>,
    pub labels: Option<Vec<f64>>,
}

impl Dataset {
    pub fn from_csv<R: Read>(reader: R, label: Option<&str>) -> Result<Self, MlError> {
        let err = |m: String| MlError::Dataset(m);
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| err(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if headers.is_empty() || headers.iter().all(String::is_empty) {
            return Err(err("missing header row".into()));
        }
        let label_col = match label {
            Some(name) => Some(
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| err(format!("label column `{name}` not in header")))?,
            ),
            None => None,
        };
        let feature_names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != label_col)
            .map(|(_, h)| h.clone())
            .collect();
        if feature_names.is_empty() {
            return Err(err("no feature columns".into()));
        }
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| err(e.to_string()))?;
            let mut point = Vec::with_capacity(feature_names.len());
            for (i, field) in record.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| err(format!("row {}: `{field}` is not a number", line + 2)))?;
                if !v.is_finite() {
                    return Err(err(format!("row {}: non-finite value", line + 2)));
                }
                if Some(i) == label_col {
                    labels.push(v);
                } else {
                    point.push(v);
                }
            }
            points.push(point);
        }
        if points.is_empty() {
            return Err(err("no data rows".into()));
        }
        Ok(Self {
            feature_names,
            points,
            label_name: label.map(str::to_string),
            labels: label_col.map(|_| labels),
        })
    }

    pub fn from_csv_str(text: &str, label: Option<&str>) -> Result<Self, MlError> {
        Self::from_csv(text.as_bytes(), label)
    }

    pub fn max_abs(&self) -> f64 {
        self.points.iter().flatten().fold(0.0, |a, &b| a.max(b.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{FullDownload, RepeatedPir};
    use approx::assert_abs_diff_eq;

    fn gram(points: &[Vec<f64>]) -> GramMatrix {
        GramMatrix::from_points(points).unwrap()
    }

    #[test]
    fn two_point_svm_is_analytic() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let lg = LabeledGram::new(gram(&pts), vec![1.0, -1.0]).unwrap();
        let sol = svm_dual_train(&lg, None).unwrap();
        assert_abs_diff_eq!(sol.alpha[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.alpha[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.bias, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.objective, 0.5, epsilon = 1e-12);
        let f = sol.decision(lg.labels(), &kernel_row(&pts, &[0.3, 5.0]));
        assert!(f > 0.0);
    }

    #[test]
    fn same_labels_have_no_support_vector() {
        let pts = vec![vec![1.0], vec![2.0], vec![3.0]];
        let lg = LabeledGram::new(gram(&pts), vec![1.0; 3]).unwrap();
        assert_eq!(svm_dual_train(&lg, None), Err(MlError::NoSupportVector));
    }

    #[test]
    fn bad_labels_and_box() {
        let pts = vec![vec![1.0], vec![2.0]];
        let lg = LabeledGram::new(gram(&pts), vec![1.0, 0.5]).unwrap();
        assert_eq!(svm_dual_train(&lg, None), Err(MlError::InvalidLabel(0.5)));
        let lg = LabeledGram::new(gram(&pts), vec![1.0, -1.0]).unwrap();
        assert_eq!(svm_dual_train(&lg, Some(-1.0)), Err(MlError::InvalidBox(-1.0)));
        assert!(LabeledGram::new(gram(&pts), vec![1.0]).is_err());
    }

    #[test]
    fn inseparable_points_need_a_box() {
        let pts = vec![vec![1.0], vec![1.0]];
        let lg = LabeledGram::new(gram(&pts), vec![1.0, -1.0]).unwrap();
        assert!(matches!(svm_dual_train(&lg, None), Err(MlError::NoConvergence { .. })));
        let sol = svm_dual_train(&lg, Some(1.0)).unwrap();
        assert_abs_diff_eq!(sol.alpha[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn regression_identity() {
        let g = GramMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let fit = regression_fit(&g, &[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.coefficients[1], 2.0, epsilon = 1e-14);
        assert_eq!(fit.rank, 2);
        assert!(regression_fit(&g, &[1.0]).is_err());
    }

    #[test]
    fn regression_line() {
        let xs = [-1.0, 0.0, 1.0, 2.0, 3.5];
        let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let g = gram(&pts).augmented();
        let fit = regression_fit(&g, &y).unwrap();
        assert_eq!(fit.rank, 2);
        for x in [-3.0, 0.25, 10.0] {
            let row: Vec<f64> = kernel_row(&pts, &[x]).iter().map(|k| k + 1.0).collect();
            assert_abs_diff_eq!(fit.predict(&row), 2.0 * x + 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn pca_two_points() {
        let pts = vec![vec![2.0, 0.0], vec![1.0, 0.0]];
        let g = gram(&pts);
        assert_eq!(g.matrix(), &DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0]));
        let pca = pca_gram(&g, 1).unwrap();
        assert_abs_diff_eq!(pca.eigenvalues[0], 5.0, epsilon = 1e-12);
        let u = &pca.coefficients[0];
        assert_abs_diff_eq!(u[0] / u[1], 2.0, epsilon = 1e-12);
        let dir = &pca.lift(&pts)[0];
        assert_abs_diff_eq!(dir[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dir[1], 0.0, epsilon = 1e-12);
        assert_eq!(pca_gram(&g, 2), Err(MlError::RankExceeded { requested: 2, rank: 1 }));
        assert!(pca_gram(&g, 0).is_err());
    }

    #[test]
    fn pca_isotropic() {
        let g = GramMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let pca = pca_gram(&g, 3).unwrap();
        for l in &pca.eigenvalues {
            assert_abs_diff_eq!(*l, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gram_validation() {
        assert!(matches!(
            GramMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0])),
            Err(MlError::NotSymmetric { .. })
        ));
        assert!(matches!(
            GramMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
            Err(MlError::NotPsd { .. })
        ));
        assert!(matches!(
            GramMatrix::new(DMatrix::zeros(2, 3)),
            Err(MlError::NotSquare { .. })
        ));
        assert!(GramMatrix::from_points(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn codec_round_trip() {
        let codec = FixedPointCodec::new(10.0, 1_000_000_007, 1.0).unwrap();
        let pts = vec![vec![0.31, -0.99], vec![-0.5, 0.72]];
        let db = encode_dataset(&pts, &codec).unwrap();
        let g = decode_gram(&crate::field::compute_table(&db), &codec).unwrap();
        // quantized to (3, -10) and (-5, 7)
        let expect = [[1.09, -0.85], [-0.85, 0.74]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(g.matrix()[(i, j)], expect[i][j], epsilon = 1e-12);
            }
        }
        assert_eq!(
            decode_integer_gram(&crate::field::compute_table(&db), &codec).unwrap(),
            codec.integer_gram(&pts)
        );
    }

    #[test]
    fn codec_guards() {
        let codec = FixedPointCodec::new(10.0, 101, 1.0).unwrap();
        assert!(matches!(
            encode_dataset(&[vec![1.0], vec![0.5]], &codec),
            Err(MlError::Wraparound { .. })
        ));
        let codec = FixedPointCodec::new(10.0, 1_000_000_007, 1.0).unwrap();
        assert!(matches!(
            encode_dataset(&[vec![1.5]], &codec),
            Err(MlError::ValueOutOfRange { .. })
        ));
        assert!(FixedPointCodec::new(0.0, 7, 1.0).is_err());
        assert!(FixedPointCodec::new(1.0, 8, 1.0).is_err());
    }

    #[test]
    fn zero_dataset() {
        let codec = FixedPointCodec::new(100.0, 1_000_000_007, 1.0).unwrap();
        let pts = vec![vec![0.0; 3]; 4];
        let pg = private_gram(&pts, &codec, &FullDownload, 2, 0).unwrap();
        assert_eq!(pg.gram.matrix(), &DMatrix::zeros(4, 4));
    }

    #[test]
    fn private_gram_matches_direct() {
        let codec = FixedPointCodec::new(1000.0, 1_000_000_007, 2.0).unwrap();
        let pts = vec![vec![0.5, -1.25, 2.0], vec![1.0, 0.0, -0.333]];
        let direct = codec.quantized_gram(&pts).unwrap();
        let pg = private_gram(&pts, &codec, &FullDownload, 2, 9).unwrap();
        assert_eq!(pg.gram, direct);
        let pg = private_gram(&pts, &codec, &RepeatedPir::new(), 2, 9).unwrap();
        assert_eq!(pg.gram, direct);
        assert_eq!(pg.transcript.nu, 8);
    }

    #[test]
    fn dataset_parsing() {
        let ds = Dataset::from_csv_str("a, b ,y\n1,2,1\n-3,4.5,-1\n", Some("y")).unwrap();
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        assert_eq!(ds.points, vec![vec![1.0, 2.0], vec![-3.0, 4.5]]);
        assert_eq!(ds.labels, Some(vec![1.0, -1.0]));
        assert_eq!(ds.max_abs(), 4.5);
        assert!(Dataset::from_csv_str("a,b\n1,x\n", None).is_err());
        assert!(Dataset::from_csv_str("a,b\n1,2,3\n", None).is_err());
        assert!(Dataset::from_csv_str("a,b\n", None).is_err());
        assert!(Dataset::from_csv_str("a,b\n1,2\n", Some("z")).is_err());
        assert!(Dataset::from_csv_str("y\n1\n", Some("y")).is_err());
        assert!(Dataset::from_csv_str("a\nNaN\n", None).is_err());
    }
}
