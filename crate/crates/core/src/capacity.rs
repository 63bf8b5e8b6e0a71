//! Closed-form capacity bounds for private retrieval of `P` out of `K`
//! replicated messages from `N` non-colluding servers, and their use as a
//! bracket on the inverse capacity of private inner-product retrieval.
//!
//! All quantities are inverse rates (download per unit of desired
//! information), so smaller is better and `1` is the floor.
//!
//! Two bounds are evaluated:
//!
//! * the converse side: `1 + (K-P)/(PN)` when `K/P <= 2`, otherwise the
//!   truncated geometric sum `Σ_{i<⌊K/P⌋} N^{-i} + (K/P - ⌊K/P⌋) N^{-⌊K/P⌋}`;
//! * the achievable side: the same closed form when `K/P <= 2`, otherwise a
//!   ratio of sums over the roots `r_i = ω_i / (N^{1/P} - ω_i)` weighted by
//!   coefficients `β_i` that solve a `P x P` Vandermonde-like system.
//!
//! Evaluated literally, the root/coefficient ratio is the *rate*; for `P = 1`
//! it reduces to `(N^K - N^{K-1}) / (N^K - 1)`, the reciprocal of the
//! single-message geometric sum. [`inverse_rate_achievable`] therefore
//! returns its reciprocal.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::pair_count;

/// Hard cap on the number of requested messages for the coefficient system.
pub const MAX_REQUESTED: usize = 64;

/// Residual tolerance for the root/coefficient system and for the imaginary
/// part of the evaluated ratio.
pub const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapacityError {
    #[error("invalid bound query: K = {messages}, P = {requested}, N = {servers} (need 1 <= P <= K, N >= 1)")]
    InvalidQuery {
        messages: usize,
        requested: usize,
        servers: usize,
    },
    #[error("root coefficients need N >= 2 (got N = {0}); the N = 1 case is handled in closed form")]
    SingleServer(usize),
    #[error("P = {0} exceeds the supported maximum of {MAX_REQUESTED}")]
    TooManyRequested(usize),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("lambda2 must lie in [0, 1), got {0}")]
    InvalidLambda(f64),
    #[error("correction constant must be non-negative and finite, got {0}")]
    InvalidConstant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundQuery {
    /// Number of (virtual) messages.
    pub messages: usize,
    /// Number of messages requested.
    pub requested: usize,
    pub servers: usize,
}

impl BoundQuery {
    pub fn new(messages: usize, requested: usize, servers: usize) -> Result<Self, CapacityError> {
        if requested == 0 || requested > messages || servers == 0 {
            return Err(CapacityError::InvalidQuery {
                messages,
                requested,
                servers,
            });
        }
        Ok(Self {
            messages,
            requested,
            servers,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.messages as f64 / self.requested as f64
    }

    /// `K <= 2P`, the regime where both bounds share one closed form.
    pub fn is_low_ratio(&self) -> bool {
        self.messages <= 2 * self.requested
    }
}

/// `1 + (K-P)/(PN)`.
fn low_ratio_closed_form(bq: &BoundQuery) -> f64 {
    let (k, p, n) = (bq.messages as f64, bq.requested as f64, bq.servers as f64);
    1.0 + (k - p) / (p * n)
}

/// `Σ_{i=0}^{⌊K/P⌋-1} N^{-i} + (K/P - ⌊K/P⌋) N^{-⌊K/P⌋}`.
fn floor_fraction_sum(bq: &BoundQuery) -> f64 {
    let n = bq.servers as f64;
    let whole = bq.messages / bq.requested;
    let frac = (bq.messages % bq.requested) as f64 / bq.requested as f64;
    let geometric: f64 = (0..whole).map(|i| n.powi(-(i as i32))).sum();
    geometric + frac * n.powi(-(whole as i32))
}

/// Converse-side inverse rate: no private scheme downloads less.
pub fn inverse_rate_converse(bq: &BoundQuery) -> f64 {
    if bq.is_low_ratio() {
        low_ratio_closed_form(bq)
    } else {
        floor_fraction_sum(bq)
    }
}

/// Roots `r_i` and coefficients `β_i` of the achievable-side expression.
#[derive(Debug, Clone, PartialEq)]
pub struct RootCoefficients {
    pub roots: Vec<Complex64>,
    pub coefficients: Vec<Complex64>,
    /// Largest residual modulus over the `P` defining equations.
    pub max_residual: f64,
}

impl RootCoefficients {
    /// Residuals of `Σ β_i r_i^{-k} = target_k` for `k = 1..=P`.
    pub fn residuals(&self, bq: &BoundQuery) -> Vec<f64> {
        let p = bq.requested;
        let rhs = system_rhs(bq);
        (1..=p)
            .map(|k| {
                let lhs: Complex64 = self
                    .roots
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(r, b)| b * r.powi(-(k as i32)))
                    .sum();
                (lhs - rhs[k - 1]).norm()
            })
            .collect()
    }
}

fn roots(bq: &BoundQuery) -> Vec<Complex64> {
    let p = bq.requested;
    let base = (bq.servers as f64).powf(1.0 / p as f64);
    (0..p)
        .map(|i| {
            let omega = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * i as f64 / p as f64);
            omega / (Complex64::new(base, 0.0) - omega)
        })
        .collect()
}

fn system_rhs(bq: &BoundQuery) -> Vec<Complex64> {
    let p = bq.requested;
    let mut rhs = vec![Complex64::new(0.0, 0.0); p];
    rhs[p - 1] = Complex64::new(((bq.servers - 1) as f64).powi((bq.messages - p) as i32), 0.0);
    rhs
}

/// Gaussian elimination with partial pivoting on a dense complex system.
pub(crate) fn solve_complex(
    mut a: Vec<Vec<Complex64>>,
    mut b: Vec<Complex64>,
) -> Result<Vec<Complex64>, CapacityError> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|z| z.norm()))
        .fold(0.0_f64, f64::max);
    for col in 0..n {
        let (pivot, pivot_norm) = (col..n)
            .map(|r| (r, a[r][col].norm()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("non-empty pivot range");
        if !(pivot_norm > scale * 1e-14) {
            return Err(CapacityError::Numeric(format!("singular system at column {col}")));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let factor = a[r][col] / a[col][col];
            if factor == Complex64::new(0.0, 0.0) {
                continue;
            }
            for c in col..n {
                let delta = factor * a[col][c];
                a[r][c] -= delta;
            }
            let delta = factor * b[col];
            b[r] -= delta;
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for r in (0..n).rev() {
        let tail: Complex64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - tail) / a[r][r];
    }
    Ok(x)
}

pub fn solve_root_coefficients(bq: &BoundQuery) -> Result<RootCoefficients, CapacityError> {
    if bq.servers < 2 {
        return Err(CapacityError::SingleServer(bq.servers));
    }
    if bq.requested > MAX_REQUESTED {
        return Err(CapacityError::TooManyRequested(bq.requested));
    }
    let p = bq.requested;
    let roots = roots(bq);
    let matrix: Vec<Vec<Complex64>> = (1..=p)
        .map(|k| roots.iter().map(|r| r.powi(-(k as i32))).collect())
        .collect();
    let coefficients = solve_complex(matrix, system_rhs(bq))?;
    let mut rc = RootCoefficients {
        roots,
        coefficients,
        max_residual: 0.0,
    };
    let residuals = rc.residuals(bq);
    // the last equation carries (N-1)^{K-P}, so judge residuals relative to it
    let target = ((bq.servers - 1) as f64).powi((bq.messages - p) as i32).max(1.0);
    rc.max_residual = residuals.iter().fold(0.0_f64, |m, r| m.max(*r)) / target;
    if !(rc.max_residual < RESIDUAL_TOL) {
        return Err(CapacityError::Numeric(format!(
            "coefficient residual {:.3e} exceeds {RESIDUAL_TOL:e}",
            rc.max_residual
        )));
    }
    Ok(rc)
}

/// The root/coefficient ratio, evaluated literally. Its real part is the
/// achievable *rate*.
pub fn root_ratio(bq: &BoundQuery) -> Result<Complex64, CapacityError> {
    let rc = solve_root_coefficients(bq)?;
    let (k, p) = (bq.messages as i32, bq.requested as i32);
    let one = Complex64::new(1.0, 0.0);
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = Complex64::new(0.0, 0.0);
    for (r, beta) in rc.roots.iter().zip(&rc.coefficients) {
        let lead = beta * r.powi(k - p);
        let g = one + one / r;
        num += lead * (g.powi(k) - g.powi(k - p));
        den += lead * (g.powi(k) - one);
    }
    let ratio = num / den;
    if !ratio.re.is_finite() || ratio.im.abs() >= RESIDUAL_TOL * ratio.re.abs().max(1.0) {
        return Err(CapacityError::Numeric(format!(
            "root ratio {ratio} is not real within tolerance"
        )));
    }
    Ok(ratio)
}

/// Achievable-side inverse rate.
///
/// `N = 1` degenerates the coefficient system; a lone server can only hide
/// the request by sending everything, so the inverse rate is `K/P`.
pub fn inverse_rate_achievable(bq: &BoundQuery) -> Result<f64, CapacityError> {
    if bq.is_low_ratio() {
        return Ok(low_ratio_closed_form(bq));
    }
    if bq.servers == 1 {
        return Ok(bq.ratio());
    }
    let rate = root_ratio(bq)?.re;
    if !(rate > 0.0) {
        return Err(CapacityError::Numeric(format!("non-positive rate {rate}")));
    }
    Ok(1.0 / rate)
}

/// Bracket on the inverse capacity of inner-product retrieval for `K` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityBounds {
    pub files: usize,
    pub messages: usize,
    pub requested: usize,
    pub servers: usize,
    /// File length, `None` for the `L -> ∞` limit.
    pub length: Option<u64>,
    /// Converse-side value with the finite-length correction subtracted.
    pub converse: f64,
    /// Converse-side value without correction.
    pub converse_limit: f64,
    pub achievable: f64,
    pub lambda2: Option<f64>,
    /// `c * λ₂^{L-1}`, zero in the limit.
    pub correction: f64,
}

/// `[converse(K(K+1)/2, P, N) - c λ₂^{L-1}, achievable(K(K+1)/2, P, N)]`.
pub fn bracket_bounds(
    files: usize,
    requested: usize,
    servers: usize,
    length: Option<u64>,
    lambda2: f64,
    constant: f64,
) -> Result<CapacityBounds, CapacityError> {
    if !(0.0..1.0).contains(&lambda2) {
        return Err(CapacityError::InvalidLambda(lambda2));
    }
    if !(constant >= 0.0 && constant.is_finite()) {
        return Err(CapacityError::InvalidConstant(constant));
    }
    let messages = pair_count(files);
    let bq = BoundQuery::new(messages, requested, servers)?;
    let converse_limit = inverse_rate_converse(&bq);
    let achievable = inverse_rate_achievable(&bq)?;
    let correction = match length {
        Some(0) => {
            return Err(CapacityError::InvalidQuery {
                messages,
                requested,
                servers,
            })
        }
        Some(l) => constant * lambda2.powi((l - 1).min(i32::MAX as u64) as i32),
        None => 0.0,
    };
    Ok(CapacityBounds {
        files,
        messages,
        requested,
        servers,
        length,
        converse: converse_limit - correction,
        converse_limit,
        achievable,
        lambda2: Some(lambda2),
        correction,
    })
}

/// Exact `L -> ∞` inverse capacity when the bracket collapses: the message
/// ratio `K(K+1)/(2P)` is at most 2 or is an integer. `None` otherwise.
pub fn exact_inverse_capacity(files: usize, requested: usize, servers: usize) -> Option<f64> {
    let messages = pair_count(files);
    let bq = BoundQuery::new(messages, requested, servers).ok()?;
    let (k, p, n) = (files as f64, requested as f64, servers as f64);
    if bq.is_low_ratio() {
        Some(1.0 + (k * (k + 1.0) - 2.0 * p) / (2.0 * p * n))
    } else if messages.is_multiple_of(requested) {
        let terms = messages / requested;
        Some((0..terms).map(|i| n.powi(-(i as i32))).sum())
    } else {
        None
    }
}
