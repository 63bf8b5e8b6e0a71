//! The inner-product table as a random walk on `F(q)^T`.
//!
//! Appending one uniform column `w ∈ F(q)^K` to every file adds the increment
//! `Δ(w) = (w_i w_j)_{i <= j}` to the table, independently of everything
//! before. The table length `L` is therefore the time index of a Markov chain
//! whose transition matrix is `M[y, x] = Pr{Δ = y - x}`, a convolution
//! operator on the abelian group `F(q)^T`. Its eigenvalues are the Fourier
//! coefficients of the law of `Δ`, and the second largest modulus `λ₂`
//! governs how quickly the table approaches the uniform distribution.
//!
//! States are encoded as integers with the first coordinate most significant,
//! so for `q = 2, K = 2` the string `100` is the state `(w₁², w₁w₂, w₂²) =
//! (1, 0, 0)`, index 4.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{pair_count, pair_unrank, FieldError, Modulus, PairSet};

/// Largest state space `q^T` that is enumerated.
pub const MAX_STATES: usize = 1 << 20;
/// Largest state space materialized as a dense matrix.
pub const MAX_DENSE_STATES: usize = 1 << 12;
/// Largest state space for which `M^Γ` is formed explicitly.
pub const MAX_POWER_CHECK_STATES: usize = 1 << 9;
/// Longest trace [`evolve`] will produce.
pub const MAX_TRACE_LENGTH: usize = 1000;
/// Cap on `q^T * L_max` retained distribution entries in a trace.
pub const MAX_TRACE_ENTRIES: usize = 1 << 27;
/// Iteration cap for the power-iteration estimate of `λ₂`.
pub const MAX_POWER_ITERATIONS: usize = 100_000;
/// Largest modulus for the sum-of-two-squares table.
pub const MAX_SQUARES_MODULUS: u64 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("state space q^T = {q}^{t} exceeds the limit {limit}")]
    TooLarge { q: u64, t: usize, limit: usize },
    #[error("trace length {0} outside [1, {MAX_TRACE_LENGTH}]")]
    TraceLength(usize),
    #[error("distribution length {got} does not match state space size {expected}")]
    DistributionLength { expected: usize, got: usize },
    #[error("empty pair set")]
    EmptyPairSet,
    #[error("dense eigensolver did not converge")]
    EigenFailure,
    #[error("power iteration did not converge within {0} steps")]
    NoConvergence(usize),
    #[error("target value must be non-zero")]
    ZeroTarget,
    #[error("modulus {0} too large for the sum-of-two-squares table")]
    ModulusTooLarge(u64),
}

/// The group `F(q)^T` with a mixed-radix index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace {
    modulus: Modulus,
    dims: usize,
    size: usize,
}

impl StateSpace {
    pub fn new(modulus: Modulus, dims: usize, limit: usize) -> Result<Self, MarkovError> {
        let q = modulus.get();
        let too_large = MarkovError::TooLarge { q, t: dims, limit };
        let mut size: usize = 1;
        for _ in 0..dims {
            size = size
                .checked_mul(usize::try_from(q).map_err(|_| too_large.clone())?)
                .filter(|&s| s <= limit)
                .ok_or_else(|| too_large.clone())?;
        }
        Ok(Self { modulus, dims, size })
    }

    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn encode(&self, coords: &[u64]) -> usize {
        debug_assert_eq!(coords.len(), self.dims);
        let q = self.modulus.get() as usize;
        coords.iter().fold(0, |acc, &c| acc * q + c as usize)
    }

    pub fn decode(&self, mut index: usize) -> Vec<u64> {
        let q = self.modulus.get() as usize;
        let mut out = vec![0; self.dims];
        for slot in out.iter_mut().rev() {
            *slot = (index % q) as u64;
            index /= q;
        }
        out
    }

    /// Digit-wise `x + y` in `F(q)^T`.
    pub fn add(&self, mut x: usize, mut y: usize) -> usize {
        let q = self.modulus.get() as usize;
        let (mut out, mut place) = (0, 1);
        for _ in 0..self.dims {
            out += ((x % q + y % q) % q) * place;
            x /= q;
            y /= q;
            place *= q;
        }
        out
    }

    /// Digit-wise `x - y` in `F(q)^T`.
    pub fn sub(&self, mut x: usize, mut y: usize) -> usize {
        let q = self.modulus.get() as usize;
        let (mut out, mut place) = (0, 1);
        for _ in 0..self.dims {
            out += ((x % q + q - y % q) % q) * place;
            x /= q;
            y /= q;
            place *= q;
        }
        out
    }

    pub fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.size as f64; self.size]
    }
}

/// The increment `Δ(w)` contributed by one column `w ∈ F(q)^K`.
pub fn column_increment(modulus: Modulus, column: &[u64]) -> Vec<u64> {
    let k = column.len();
    let mut out = Vec::with_capacity(pair_count(k));
    for i in 0..k {
        for j in i..k {
            out.push(modulus.mul(column[i], column[j]));
        }
    }
    out
}

/// Law of `Δ` over `F(q)^T`, held as exact counts out of `q^K` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaDistribution {
    space: StateSpace,
    files: usize,
    counts: Vec<u64>,
    columns: u64,
    probs: Vec<f64>,
}

impl DeltaDistribution {
    /// Tallies the increments of the given columns. Each column has `files`
    /// entries in `[0, q)`.
    pub fn from_columns<I>(q: u64, files: usize, columns: I) -> Result<Self, MarkovError>
    where
        I: IntoIterator<Item = Vec<u64>>,
    {
        let modulus = Modulus::new(q)?;
        let space = StateSpace::new(modulus, pair_count(files), MAX_STATES)?;
        let mut counts = vec![0u64; space.size()];
        let mut total = 0u64;
        for col in columns {
            if col.len() != files {
                return Err(FieldError::LengthMismatch {
                    left: files,
                    right: col.len(),
                }
                .into());
            }
            counts[space.encode(&column_increment(modulus, &col))] += 1;
            total += 1;
        }
        let probs = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        Ok(Self {
            space,
            files,
            counts,
            columns: total,
            probs,
        })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn files(&self) -> usize {
        self.files
    }

    pub fn modulus(&self) -> Modulus {
        self.space.modulus
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Exact numerators; `probs[i] = counts[i] / column_count()`.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn column_count(&self) -> u64 {
        self.columns
    }

    pub fn prob_of(&self, coords: &[u64]) -> f64 {
        self.probs[self.space.encode(coords)]
    }

    /// `(state, probability)` for every state of positive probability.
    pub fn support(&self) -> Vec<(usize, f64)> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i, p))
            .collect()
    }
}

/// Every column of `F(q)^K`, in lexicographic order.
pub fn all_columns(q: u64, files: usize) -> impl Iterator<Item = Vec<u64>> {
    let total = (q as u128).pow(files as u32);
    (0..total).map(move |mut idx| {
        let mut col = vec![0u64; files];
        for slot in col.iter_mut().rev() {
            *slot = (idx % q as u128) as u64;
            idx /= q as u128;
        }
        col
    })
}

/// Exact law of `Δ` by enumerating all `q^K` columns.
pub fn delta_distribution(q: u64, files: usize) -> Result<DeltaDistribution, MarkovError> {
    let modulus = Modulus::new(q)?;
    // validate the state space before enumerating columns
    StateSpace::new(modulus, pair_count(files), MAX_STATES)?;
    DeltaDistribution::from_columns(q, files, all_columns(q, files))
}

/// Transition operator `M[y, x] = Pr{Δ = y - x}`.
#[derive(Debug, Clone)]
pub struct TransitionOperator {
    delta: DeltaDistribution,
    dense: Option<DMatrix<f64>>,
}

impl TransitionOperator {
    pub fn new(delta: DeltaDistribution) -> Self {
        Self { delta, dense: None }
    }

    pub fn with_dense(delta: DeltaDistribution) -> Result<Self, MarkovError> {
        let space = *delta.space();
        if space.size() > MAX_DENSE_STATES {
            return Err(MarkovError::TooLarge {
                q: space.modulus().get(),
                t: space.dims(),
                limit: MAX_DENSE_STATES,
            });
        }
        let n = space.size();
        let m = DMatrix::from_fn(n, n, |i, j| delta.probs()[space.sub(i, j)]);
        Ok(Self { delta, dense: Some(m) })
    }

    pub fn delta(&self) -> &DeltaDistribution {
        &self.delta
    }

    pub fn dense(&self) -> Option<&DMatrix<f64>> {
        self.dense.as_ref()
    }

    /// One step `p ↦ M p`, computed as a convolution with the law of `Δ`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let space = self.delta.space();
        let mut next = vec![0.0; space.size()];
        for (d, pd) in self.delta.support() {
            for (x, &px) in p.iter().enumerate() {
                if px != 0.0 {
                    next[space.add(x, d)] += px * pd;
                }
            }
        }
        next
    }

    /// `p ↦ Mᵀ p`, the convolution with the law of `-Δ`.
    pub fn apply_transpose(&self, p: &[f64]) -> Vec<f64> {
        let space = self.delta.space();
        let mut next = vec![0.0; space.size()];
        for (d, pd) in self.delta.support() {
            for (x, &px) in p.iter().enumerate() {
                if px != 0.0 {
                    next[space.sub(x, d)] += px * pd;
                }
            }
        }
        next
    }
}

pub fn transition_dense(q: u64, files: usize) -> Result<TransitionOperator, MarkovError> {
    let modulus = Modulus::new(q)?;
    StateSpace::new(modulus, pair_count(files), MAX_DENSE_STATES)?;
    TransitionOperator::with_dense(delta_distribution(q, files)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// From the character method these are indexed by the character `χ`
    /// (same encoding as states); from the dense oracle the order is the
    /// solver's.
    pub eigenvalues: Vec<Complex64>,
    pub lambda2: f64,
    /// Only the moduli are known; `eigenvalues` holds them as reals.
    pub moduli_only: bool,
}

impl Spectrum {
    pub fn moduli_sorted(&self) -> Vec<f64> {
        let mut m: Vec<f64> = self.eigenvalues.iter().map(|z| z.norm()).collect();
        m.sort_by(|a, b| b.total_cmp(a));
        m
    }
}

/// Eigenvalues `λ_χ = Σ_δ Pr{Δ = δ} e^{2πi⟨χ,δ⟩/q}` by a separable DFT over
/// `F(q)^T`, one axis at a time.
pub fn spectrum_via_characters(d: &DeltaDistribution) -> Spectrum {
    let space = d.space();
    let q = space.modulus().get() as usize;
    let twiddles: Vec<Complex64> = (0..q)
        .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / q as f64))
        .collect();
    let mut data: Vec<Complex64> = d.probs().iter().map(|&p| Complex64::new(p, 0.0)).collect();
    let mut line = vec![Complex64::new(0.0, 0.0); q];
    let mut stride = 1;
    for _ in 0..space.dims() {
        let block = stride * q;
        for base in (0..space.size()).step_by(block) {
            for offset in 0..stride {
                let start = base + offset;
                for (k, out) in line.iter_mut().enumerate() {
                    *out = (0..q).map(|j| data[start + j * stride] * twiddles[(j * k) % q]).sum();
                }
                for (k, v) in line.iter().enumerate() {
                    data[start + k * stride] = *v;
                }
            }
        }
        stride = block;
    }
    let lambda2 = data.iter().skip(1).map(|z| z.norm()).fold(0.0, f64::max);
    Spectrum {
        eigenvalues: data,
        lambda2,
        moduli_only: false,
    }
}

/// Eigenvalues of the dense matrix via a real Schur decomposition.
///
/// Francis iterations can stall on the near-permutation matrices that sparse
/// increment laws produce. `M` is normal (it commutes with `Mᵀ`), so its
/// singular values are its eigenvalue moduli; in that case the moduli are
/// returned as nonnegative reals and `moduli_only` is set. Normality is
/// checked on the matrix rather than assumed.
pub fn spectrum_dense_oracle(m: &TransitionOperator) -> Result<Spectrum, MarkovError> {
    let dense = m.dense().ok_or(MarkovError::TooLarge {
        q: m.delta.modulus().get(),
        t: m.delta.space().dims(),
        limit: MAX_DENSE_STATES,
    })?;
    let mut moduli_only = false;
    let eigenvalues: Vec<Complex64> = if dense.nrows() == 1 {
        vec![Complex64::new(dense[(0, 0)], 0.0)]
    } else if let Some(schur) = nalgebra::Schur::try_new(dense.clone(), 1e-15, 100_000) {
        schur.complex_eigenvalues().iter().copied().collect()
    } else {
        let commutator = (dense * dense.transpose() - dense.transpose() * dense).amax();
        if commutator > 1e-12 {
            return Err(MarkovError::EigenFailure);
        }
        moduli_only = true;
        dense
            .singular_values()
            .iter()
            .map(|&s| Complex64::new(s, 0.0))
            .collect()
    };
    let mut moduli: Vec<f64> = eigenvalues.iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let lambda2 = moduli.get(1).copied().unwrap_or(0.0);
    Ok(Spectrum {
        eigenvalues,
        lambda2,
        moduli_only,
    })
}

/// `λ₂` by power iteration on `MᵀM` restricted to the complement of the
/// constant vector. `M` commutes with its transpose (both are convolutions),
/// so the top singular value there equals the top eigenvalue modulus.
/// Matrix-free: `M` and `Mᵀ` are applied as convolutions.
pub fn lambda2_power_iteration(m: &TransitionOperator) -> Result<f64, MarkovError> {
    let n = m.delta.space().size();
    if n == 1 {
        return Ok(0.0);
    }
    let center = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // deterministic start with components along every non-constant direction
    let mut v: Vec<f64> = (0..n)
        .map(|i| ((i * 7919 + 13) % 1009) as f64 / 1009.0 + (i as f64).sin())
        .collect();
    center(&mut v);
    let mut estimate = 0.0;
    for _ in 0..MAX_POWER_ITERATIONS {
        let len = norm(&v);
        if len < 1e-300 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= len);
        let mut w = m.apply_transpose(&m.apply(&v));
        center(&mut w);
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        if next < 1e-24 {
            return Ok(0.0);
        }
        if (next - estimate).abs() <= 1e-15 * next.max(1e-300) {
            return Ok(next.sqrt());
        }
        estimate = next;
        v = w;
    }
    Err(MarkovError::NoConvergence(MAX_POWER_ITERATIONS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrreducibilityReport {
    pub irreducible: bool,
    pub support_size: usize,
    /// Size of the subgroup generated by the support of `Δ`.
    pub generated_size: usize,
    pub group_size: usize,
    /// `Γ = 5T`.
    pub gamma: usize,
    pub gamma_checked: bool,
    /// Whether every entry of `M^Γ` is positive, when checked.
    pub gamma_all_positive: Option<bool>,
}

/// The chain is irreducible iff the support of `Δ` generates `F(q)^T`. For
/// small spaces the dense power `M^{5T}` is also checked entrywise.
pub fn is_irreducible(d: &DeltaDistribution) -> Result<IrreducibilityReport, MarkovError> {
    let space = d.space();
    let support: Vec<usize> = d.support().into_iter().map(|(s, _)| s).collect();
    let mut seen = vec![false; space.size()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut generated = 1;
    while let Some(x) = queue.pop_front() {
        for &s in &support {
            let y = space.add(x, s);
            if !seen[y] {
                seen[y] = true;
                generated += 1;
                queue.push_back(y);
            }
        }
    }
    let gamma = 5 * space.dims();
    let gamma_all_positive = if space.size() <= MAX_POWER_CHECK_STATES {
        let op = TransitionOperator::with_dense(d.clone())?;
        let power = matrix_power(op.dense().expect("dense requested"), gamma);
        Some(power.iter().all(|&v| v > 0.0))
    } else {
        None
    };
    Ok(IrreducibilityReport {
        irreducible: generated == space.size(),
        support_size: support.len(),
        generated_size: generated,
        group_size: space.size(),
        gamma,
        gamma_checked: gamma_all_positive.is_some(),
        gamma_all_positive,
    })
}

pub(crate) fn matrix_power(m: &DMatrix<f64>, mut exp: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::<f64>::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while exp > 0 {
        if exp & 1 == 1 {
            acc = &acc * &base;
        }
        exp >>= 1;
        if exp > 0 {
            base = &base * &base;
        }
    }
    acc
}

/// Some `(s, t)` with `s² + t² ≡ a (mod q)`, found by exhaustive search over
/// `t` ascending. Such a pair exists for every prime `q`; failure to find one
/// is a bug and panics.
pub fn sum_two_squares(q: u64, a: u64) -> Result<(u64, u64), MarkovError> {
    let modulus = Modulus::new(q)?;
    if q > MAX_SQUARES_MODULUS {
        return Err(MarkovError::ModulusTooLarge(q));
    }
    let a = modulus.reduce(a);
    let mut root: Vec<Option<u64>> = vec![None; q as usize];
    for s in 0..q {
        let sq = modulus.mul(s, s) as usize;
        root[sq].get_or_insert(s);
    }
    for t in 0..q {
        let need = modulus.sub(a, modulus.mul(t, t));
        if let Some(s) = root[need as usize] {
            return Ok((s, t));
        }
    }
    panic!("no sum-of-two-squares decomposition of {a} mod {q}");
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WitnessCase {
    /// Target coordinate is a square `⟨W_i, W_i⟩`.
    Diagonal,
    /// Target coordinate is a cross product `⟨W_i, W_j⟩`, `i < j`.
    OffDiagonal,
}

/// Five fresh columns whose accumulated increment is `a` at one coordinate
/// and zero elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReachabilityWitness {
    pub case: WitnessCase,
    pub coordinate: usize,
    pub value: u64,
    /// `columns[γ][k]` is the symbol appended to file `k+1` at step `γ+1`.
    pub columns: Vec<Vec<u64>>,
    pub accumulated: Vec<u64>,
}

impl ReachabilityWitness {
    pub fn verifies(&self) -> bool {
        self.accumulated
            .iter()
            .enumerate()
            .all(|(i, &v)| v == if i == self.coordinate { self.value } else { 0 })
    }
}

pub fn reachability_witness(
    q: u64,
    files: usize,
    coordinate: usize,
    value: u64,
) -> Result<ReachabilityWitness, MarkovError> {
    let modulus = Modulus::new(q)?;
    let value = modulus.reduce(value);
    if value == 0 {
        return Err(MarkovError::ZeroTarget);
    }
    let pair = pair_unrank(files, coordinate)?;
    let (i, j) = (pair.first() - 1, pair.second() - 1);
    let mut columns = vec![vec![0u64; files]; 5];
    let case = if i == j {
        let (s, t) = sum_two_squares(q, value)?;
        columns[0][i] = t;
        columns[1][i] = s;
        WitnessCase::Diagonal
    } else {
        let (s1, t1) = sum_two_squares(q, modulus.neg(modulus.mul(value, value)))?;
        let (s2, t2) = sum_two_squares(q, modulus.neg(1))?;
        columns[0][i] = value;
        columns[0][j] = 1;
        columns[1][i] = s1;
        columns[2][i] = t1;
        columns[3][j] = s2;
        columns[4][j] = t2;
        WitnessCase::OffDiagonal
    };
    let mut accumulated = vec![0u64; pair_count(files)];
    for col in &columns {
        for (acc, inc) in accumulated.iter_mut().zip(column_increment(modulus, col)) {
            *acc = modulus.add(*acc, inc);
        }
    }
    Ok(ReachabilityWitness {
        case,
        coordinate,
        value,
        columns,
        accumulated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub length: usize,
    pub distribution: Vec<f64>,
    pub sup_dist: f64,
    pub l2_dist: f64,
}

/// Law of the table for `L = 1..=L_max` with its distance to uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub space: StateSpace,
    pub lambda2: f64,
    pub points: Vec<TracePoint>,
    /// `exp` of the least-squares slope of `ln ‖p^{(L)} - π‖₂` over the last
    /// half of the trace; `None` once the distance hits zero.
    pub decay_rate: Option<f64>,
    /// Intercept `c` of the same fit, as in `c · rate^{L-1}`.
    pub constant: Option<f64>,
    /// `max_L ‖p^{(L)} - π‖₂ / λ₂^{L-1}`.
    pub envelope: f64,
}

impl ConvergenceTrace {
    /// Constant `c` (bits) with `P log q - H(X_P) <= c λ₂^{L-1}` for every
    /// pair subset. The entropy gap is a KL divergence to uniform, bounded by
    /// the chi-square divergence `q^T ‖p - π‖₂²`, and marginalizing does not
    /// increase it.
    pub fn entropy_constant(&self) -> f64 {
        self.space.size() as f64 * self.envelope * self.envelope / std::f64::consts::LN_2
    }

    pub fn point(&self, length: usize) -> Option<&TracePoint> {
        self.points.get(length.checked_sub(1)?)
    }
}

fn distances(p: &[f64], uniform: f64) -> (f64, f64) {
    let mut sup = 0.0_f64;
    let mut sq = 0.0;
    for &v in p {
        let d = v - uniform;
        sup = sup.max(d.abs());
        sq += d * d;
    }
    (sup, sq.sqrt())
}

/// `p^{(1)} = law(Δ)`, `p^{(L+1)} = p^{(L)} * law(Δ)`.
pub fn evolve(d: &DeltaDistribution, l_max: usize) -> Result<ConvergenceTrace, MarkovError> {
    if l_max == 0 || l_max > MAX_TRACE_LENGTH {
        return Err(MarkovError::TraceLength(l_max));
    }
    let space = *d.space();
    if space.size().saturating_mul(l_max) > MAX_TRACE_ENTRIES {
        return Err(MarkovError::TooLarge {
            q: space.modulus().get(),
            t: space.dims(),
            limit: MAX_TRACE_ENTRIES / l_max,
        });
    }
    let lambda2 = spectrum_via_characters(d).lambda2;
    let op = TransitionOperator::new(d.clone());
    let uniform = 1.0 / space.size() as f64;
    let mut points = Vec::with_capacity(l_max);
    let mut p = d.probs().to_vec();
    for length in 1..=l_max {
        if length > 1 {
            p = op.apply(&p);
        }
        let (sup_dist, l2_dist) = distances(&p, uniform);
        points.push(TracePoint {
            length,
            distribution: p.clone(),
            sup_dist,
            l2_dist,
        });
    }
    let (decay_rate, constant) = fit_decay(&points);
    let envelope = points
        .iter()
        .filter(|pt| pt.l2_dist > 0.0)
        .map(|pt| {
            let scale = lambda2.powi(pt.length as i32 - 1);
            if scale > 0.0 {
                pt.l2_dist / scale
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Ok(ConvergenceTrace {
        space,
        lambda2,
        points,
        decay_rate,
        constant,
        envelope,
    })
}

/// Least squares of `ln l2` against `L - 1` over `L ∈ [⌈L_max/2⌉, L_max]`.
fn fit_decay(points: &[TracePoint]) -> (Option<f64>, Option<f64>) {
    let l_max = points.len();
    let tail: Vec<(f64, f64)> = points
        .iter()
        .filter(|pt| 2 * pt.length >= l_max)
        .map(|pt| ((pt.length - 1) as f64, pt.l2_dist))
        .collect();
    // distances below this are rounding noise, not signal
    if tail.len() < 2 || tail.iter().any(|&(_, y)| y <= 1e-13) {
        return (None, None);
    }
    let n = tail.len() as f64;
    let mx = tail.iter().map(|t| t.0).sum::<f64>() / n;
    let my = tail.iter().map(|t| t.1.ln()).sum::<f64>() / n;
    let sxx: f64 = tail.iter().map(|t| (t.0 - mx).powi(2)).sum();
    let sxy: f64 = tail.iter().map(|t| (t.0 - mx) * (t.1.ln() - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    (Some(slope.exp()), Some(intercept.exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetEntropy {
    pub bits: f64,
    /// Entropy measured in units of `log q`.
    pub log_q_units: f64,
    pub requested: usize,
}

/// Entropy of the table restricted to the coordinates in `pairs`.
pub fn subset_entropy(distribution: &[f64], space: &StateSpace, pairs: &PairSet) -> Result<SubsetEntropy, MarkovError> {
    if distribution.len() != space.size() {
        return Err(MarkovError::DistributionLength {
            expected: space.size(),
            got: distribution.len(),
        });
    }
    if pairs.is_empty() {
        return Err(MarkovError::EmptyPairSet);
    }
    let ranks = pairs.ranks();
    if let Some(&r) = ranks.iter().find(|&&r| r >= space.dims()) {
        return Err(FieldError::RankOutOfRange {
            rank: r,
            files: pairs.files(),
            total: space.dims(),
        }
        .into());
    }
    let q = space.modulus().get() as usize;
    let marginal_size = q.pow(ranks.len() as u32);
    let mut marginal = vec![0.0; marginal_size];
    for (x, &px) in distribution.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        let coords = space.decode(x);
        let z = ranks.iter().fold(0, |acc, &r| acc * q + coords[r] as usize);
        marginal[z] += px;
    }
    let bits: f64 = marginal.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    Ok(SubsetEntropy {
        bits,
        log_q_units: bits / (q as f64).log2(),
        requested: ranks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::PairIndex;
    use approx::assert_abs_diff_eq;

    fn coords(s: &str) -> Vec<u64> {
        s.chars().map(|c| c.to_digit(10).unwrap() as u64).collect()
    }

    #[test]
    fn state_encoding() {
        let space = StateSpace::new(Modulus::new(3).unwrap(), 3, MAX_STATES).unwrap();
        assert_eq!(space.size(), 27);
        for x in 0..27 {
            assert_eq!(space.encode(&space.decode(x)), x);
            for y in 0..27 {
                assert_eq!(space.sub(space.add(x, y), y), x);
            }
        }
        assert_eq!(space.encode(&coords("100")), 9);
    }

    #[test]
    fn delta_q2_k2() {
        let d = delta_distribution(2, 2).unwrap();
        for (s, p) in [("000", 0.25), ("001", 0.25), ("100", 0.25), ("111", 0.25)] {
            assert_eq!(d.prob_of(&coords(s)), p, "{s}");
        }
        assert_eq!(d.support().len(), 4);
    }

    #[test]
    fn delta_q3_k2() {
        let d = delta_distribution(3, 2).unwrap();
        assert_eq!(d.counts()[d.space().encode(&coords("000"))], 1);
        for s in ["001", "100", "111", "121"] {
            assert_eq!(d.counts()[d.space().encode(&coords(s))], 2, "{s}");
        }
        assert_eq!(d.support().len(), 5);
        assert_eq!(d.column_count(), 9);
    }

    #[test]
    fn delta_q2_k1() {
        let d = delta_distribution(2, 1).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn delta_size_guard() {
        // q = 2, K = 6 gives T = 21
        assert!(matches!(delta_distribution(2, 6), Err(MarkovError::TooLarge { .. })));
        assert!(matches!(transition_dense(2, 5), Err(MarkovError::TooLarge { .. })));
    }

    #[test]
    fn dense_small_cases() {
        let m = transition_dense(2, 1).unwrap();
        assert!(m.dense().unwrap().iter().all(|&v| v == 0.5));
        let m = transition_dense(2, 2).unwrap();
        let dense = m.dense().unwrap();
        assert_eq!(dense.nrows(), 8);
        for r in 0..8 {
            assert_abs_diff_eq!(dense.row(r).sum(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn character_spectrum_examples() {
        assert_abs_diff_eq!(
            spectrum_via_characters(&delta_distribution(2, 2).unwrap()).lambda2,
            0.5,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            spectrum_via_characters(&delta_distribution(3, 2).unwrap()).lambda2,
            1.0 / 3f64.sqrt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            spectrum_via_characters(&delta_distribution(2, 1).unwrap()).lambda2,
            0.0,
            epsilon = 1e-15
        );
        let s = spectrum_via_characters(&delta_distribution(2, 2).unwrap());
        // χ = 010 picks the cross coordinate: (1 + 1 + 1 - 1)/4
        assert_abs_diff_eq!(s.eigenvalues[2].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.eigenvalues[0].re, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn power_iteration_matches() {
        for (q, k) in [(2, 1), (2, 2), (3, 2)] {
            let m = transition_dense(q, k).unwrap();
            let chars = spectrum_via_characters(m.delta()).lambda2;
            assert_abs_diff_eq!(lambda2_power_iteration(&m).unwrap(), chars, epsilon = 1e-8);
            let sparse = TransitionOperator::new(m.delta().clone());
            assert_abs_diff_eq!(lambda2_power_iteration(&sparse).unwrap(), chars, epsilon = 1e-8);
        }
    }

    #[test]
    fn dense_oracle_survives_permutation_matrices() {
        // a single nonzero column makes M a permutation of the states
        for col in all_columns(3, 2).skip(1) {
            let d = DeltaDistribution::from_columns(3, 2, [col]).unwrap();
            let op = TransitionOperator::with_dense(d.clone()).unwrap();
            let s = spectrum_dense_oracle(&op).unwrap();
            assert_abs_diff_eq!(s.lambda2, 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(spectrum_via_characters(&d).lambda2, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn transpose_apply_matches_dense() {
        let m = transition_dense(3, 2).unwrap();
        let p: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
        let dense = m.dense().unwrap().transpose() * nalgebra::DVector::from_column_slice(&p);
        for (a, b) in m.apply_transpose(&p).iter().zip(dense.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_squares_examples() {
        assert_eq!(sum_two_squares(5, 3).unwrap(), (2, 2));
        assert_eq!(sum_two_squares(2, 1).unwrap(), (1, 0));
        assert_eq!(sum_two_squares(7, 0).unwrap(), (0, 0));
        assert!(sum_two_squares(9, 1).is_err());
    }

    #[test]
    fn witness_examples() {
        let w = reachability_witness(5, 2, 0, 3).unwrap();
        assert_eq!(w.case, WitnessCase::Diagonal);
        assert_eq!(w.columns[0], vec![2, 0]);
        assert_eq!(w.columns[1], vec![2, 0]);
        assert_eq!(w.accumulated, vec![3, 0, 0]);

        let w = reachability_witness(5, 2, 1, 1).unwrap();
        assert_eq!(w.case, WitnessCase::OffDiagonal);
        assert_eq!(w.accumulated, vec![0, 1, 0]);
        assert!(w.verifies());

        let w = reachability_witness(2, 2, 2, 1).unwrap();
        assert_eq!(w.accumulated, vec![0, 0, 1]);
        assert_eq!(reachability_witness(5, 2, 1, 0), Err(MarkovError::ZeroTarget));
        assert!(reachability_witness(5, 2, 3, 1).is_err());
    }

    #[test]
    fn irreducible_small() {
        let r = is_irreducible(&delta_distribution(2, 2).unwrap()).unwrap();
        assert!(r.irreducible);
        assert_eq!(r.generated_size, 8);
        assert_eq!(r.gamma_all_positive, Some(true));
        let r = is_irreducible(&delta_distribution(5, 2).unwrap()).unwrap();
        assert!(r.irreducible && r.gamma == 15 && r.gamma_all_positive == Some(true));
    }

    #[test]
    fn reducible_support_is_detected() {
        // only the zero column: Δ is a point mass at 0
        let d = DeltaDistribution::from_columns(3, 2, [vec![0, 0]]).unwrap();
        let r = is_irreducible(&d).unwrap();
        assert!(!r.irreducible);
        assert_eq!(r.generated_size, 1);
        assert_eq!(r.gamma_all_positive, Some(false));
    }

    #[test]
    fn evolve_examples() {
        let d = delta_distribution(2, 2).unwrap();
        let trace = evolve(&d, 2).unwrap();
        assert_abs_diff_eq!(trace.points[0].sup_dist, 0.125, epsilon = 1e-15);
        let p2 = &trace.points[1].distribution;
        assert_abs_diff_eq!(p2[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p2[d.space().encode(&coords("010"))], 0.0, epsilon = 1e-15);
        let eighths = p2.iter().filter(|&&v| (v - 0.125).abs() < 1e-15).count();
        assert_eq!(eighths, 6);
        assert_abs_diff_eq!(trace.points[1].l2_dist / trace.points[0].l2_dist, 0.5, epsilon = 1e-12);

        let trace = evolve(&delta_distribution(2, 1).unwrap(), 2).unwrap();
        assert_eq!(trace.points[1].distribution, vec![0.5, 0.5]);
        assert_eq!(trace.decay_rate, None);
        assert!(evolve(&d, 0).is_err());
        assert!(evolve(&d, MAX_TRACE_LENGTH + 1).is_err());
    }

    #[test]
    fn entropy_examples() {
        let d = delta_distribution(2, 2).unwrap();
        let trace = evolve(&d, 20).unwrap();
        let p1 = &trace.points[0].distribution;
        let cross = PairSet::new(2, [PairIndex::new(1, 2)]).unwrap();
        let h = subset_entropy(p1, d.space(), &cross).unwrap();
        let h14 = -(0.25f64 * 0.25f64.log2() + 0.75 * 0.75f64.log2());
        assert_abs_diff_eq!(h.bits, h14, epsilon = 1e-12);
        let diag = PairSet::new(2, [PairIndex::new(1, 1)]).unwrap();
        assert_abs_diff_eq!(subset_entropy(p1, d.space(), &diag).unwrap().bits, 1.0, epsilon = 1e-15);
        let late = &trace.points[19].distribution;
        assert_abs_diff_eq!(
            subset_entropy(late, d.space(), &cross).unwrap().bits,
            1.0,
            epsilon = 1e-4
        );
        let empty = PairSet::new(2, []).unwrap();
        assert_eq!(subset_entropy(p1, d.space(), &empty), Err(MarkovError::EmptyPairSet));
    }
}
