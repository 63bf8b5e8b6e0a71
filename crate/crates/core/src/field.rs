//! Prime-field arithmetic, replicated databases and the canonical ordering of
//! file pairs.
//!
//! A database holds `K` files of `L` symbols each over `F(q)`. The quantity of
//! interest is the table of all `K(K+1)/2` pairwise inner products, diagonal
//! included, laid out in lexicographic pair order: `{i,j}` precedes `{k,l}`
//! iff `i < k`, or `i = k` and `j < l`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest modulus accepted. Products of two reduced symbols fit in `u128`
/// with plenty of headroom, and sums of products stay exact.
pub const MAX_MODULUS: u64 = 1 << 61;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("modulus {0} is not prime")]
    NotPrime(u64),
    #[error("modulus {0} exceeds the supported maximum 2^61")]
    ModulusTooLarge(u64),
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("modulus mismatch: {left} vs {right}")]
    ModulusMismatch { left: u64, right: u64 },
    #[error("invalid dimensions: K = {files}, L = {length} (both must be at least 1)")]
    EmptyDimensions { files: usize, length: usize },
    #[error("pair {{{i},{j}}} is not valid for K = {files}")]
    InvalidPair { i: usize, j: usize, files: usize },
    #[error("pair rank {rank} out of range for K = {files} (T = {total})")]
    RankOutOfRange { rank: usize, files: usize, total: usize },
    #[error("pair {{{i},{j}}} appears more than once")]
    DuplicatePair { i: usize, j: usize },
    #[error("symbol {value} is out of range for modulus {modulus}")]
    SymbolOutOfRange { value: u64, modulus: u64 },
    #[error("malformed database file: {0}")]
    Parse(String),
}

/// Deterministic Miller-Rabin, exact for every `u64`.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const SMALL: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for p in SMALL {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for a in SMALL {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[inline]
pub(crate) fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// A validated prime modulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Modulus(u64);

impl Modulus {
    pub fn new(q: u64) -> Result<Self, FieldError> {
        if q > MAX_MODULUS {
            return Err(FieldError::ModulusTooLarge(q));
        }
        if !is_prime(q) {
            return Err(FieldError::NotPrime(q));
        }
        Ok(Self(q))
    }

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn reduce(self, v: u64) -> u64 {
        v % self.0
    }

    /// Reduces a signed integer into `[0, q)`.
    pub fn reduce_signed(self, v: i128) -> u64 {
        v.rem_euclid(self.0 as i128) as u64
    }

    #[inline]
    pub fn add(self, a: u64, b: u64) -> u64 {
        let s = a as u128 + b as u128;
        (s % self.0 as u128) as u64
    }

    #[inline]
    pub fn sub(self, a: u64, b: u64) -> u64 {
        self.add(a, self.0 - b % self.0)
    }

    #[inline]
    pub fn mul(self, a: u64, b: u64) -> u64 {
        mul_mod(a, b, self.0)
    }

    pub fn neg(self, a: u64) -> u64 {
        (self.0 - a % self.0) % self.0
    }

    /// Maps `v ∈ [0, q)` to its representative in `(-q/2, q/2]`.
    pub fn center_lift(self, v: u64) -> i128 {
        let v = v % self.0;
        if v > self.0 / 2 {
            v as i128 - self.0 as i128
        } else {
            v as i128
        }
    }
}

impl TryFrom<u64> for Modulus {
    type Error = FieldError;

    fn try_from(q: u64) -> Result<Self, Self::Error> {
        Modulus::new(q)
    }
}

impl From<Modulus> for u64 {
    fn from(m: Modulus) -> u64 {
        m.0
    }
}

impl fmt::Display for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An element of `F(q)`, always stored reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldElement {
    value: u64,
    modulus: Modulus,
}

impl FieldElement {
    pub fn new(value: u64, q: u64) -> Result<Self, FieldError> {
        let modulus = Modulus::new(q)?;
        Ok(Self::in_field(value, modulus))
    }

    pub fn in_field(value: u64, modulus: Modulus) -> Self {
        Self {
            value: modulus.reduce(value),
            modulus,
        }
    }

    pub fn zero(modulus: Modulus) -> Self {
        Self { value: 0, modulus }
    }

    pub fn value(self) -> u64 {
        self.value
    }

    pub fn modulus(self) -> Modulus {
        self.modulus
    }

    fn check(self, other: Self) -> Result<(), FieldError> {
        if self.modulus != other.modulus {
            return Err(FieldError::ModulusMismatch {
                left: self.modulus.get(),
                right: other.modulus.get(),
            });
        }
        Ok(())
    }

    pub fn try_add(self, other: Self) -> Result<Self, FieldError> {
        self.check(other)?;
        Ok(Self::in_field(self.modulus.add(self.value, other.value), self.modulus))
    }

    pub fn try_mul(self, other: Self) -> Result<Self, FieldError> {
        self.check(other)?;
        Ok(Self::in_field(self.modulus.mul(self.value, other.value), self.modulus))
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (mod {})", self.value, self.modulus)
    }
}

/// `Σ_ℓ a_ℓ b_ℓ mod q`.
pub fn inner_product(a: &[FieldElement], b: &[FieldElement]) -> Result<FieldElement, FieldError> {
    if a.len() != b.len() {
        return Err(FieldError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let Some(first) = a.first().or(b.first()) else {
        return Err(FieldError::LengthMismatch { left: 0, right: 0 });
    };
    let modulus = first.modulus;
    for x in a.iter().chain(b) {
        first.check(*x)?;
    }
    let raw_a: Vec<u64> = a.iter().map(|x| x.value).collect();
    let raw_b: Vec<u64> = b.iter().map(|x| x.value).collect();
    Ok(FieldElement::in_field(
        raw_inner_product(modulus, &raw_a, &raw_b),
        modulus,
    ))
}

/// Inner product over reduced symbols. Lengths must already agree.
pub(crate) fn raw_inner_product(modulus: Modulus, a: &[u64], b: &[u64]) -> u64 {
    debug_assert_eq!(a.len(), b.len());
    let q = modulus.get() as u128;
    let mut acc: u128 = 0;
    for (&x, &y) in a.iter().zip(b) {
        // each product is below 2^122, so reduce before the next add
        acc = (acc + x as u128 * y as u128) % q;
    }
    acc as u64
}

/// Unordered file pair `{i, j}`, 1-based, stored with `i <= j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairIndex {
    i: usize,
    j: usize,
}

impl PairIndex {
    pub fn new(a: usize, b: usize) -> Self {
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        Self { i, j }
    }

    pub fn checked(a: usize, b: usize, files: usize) -> Result<Self, FieldError> {
        let p = Self::new(a, b);
        if p.i == 0 || p.j > files {
            return Err(FieldError::InvalidPair { i: p.i, j: p.j, files });
        }
        Ok(p)
    }

    pub fn first(self) -> usize {
        self.i
    }

    pub fn second(self) -> usize {
        self.j
    }

    pub fn is_diagonal(self) -> bool {
        self.i == self.j
    }
}

impl fmt::Display for PairIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{},{}}}", self.i, self.j)
    }
}

/// Number of unordered pairs with repetition, `K(K+1)/2`.
pub fn pair_count(files: usize) -> usize {
    files * (files + 1) / 2
}

pub fn pair_rank(files: usize, pair: PairIndex) -> Result<usize, FieldError> {
    let PairIndex { i, j } = PairIndex::checked(pair.i, pair.j, files)?;
    // rows 1..i-1 contribute K, K-1, ..., K-i+2 pairs
    let before = (i - 1) * (2 * files + 2 - i) / 2;
    Ok(before + (j - i))
}

pub fn pair_unrank(files: usize, rank: usize) -> Result<PairIndex, FieldError> {
    let total = pair_count(files);
    if rank >= total {
        return Err(FieldError::RankOutOfRange { rank, files, total });
    }
    let mut rest = rank;
    for i in 1..=files {
        let row = files - i + 1;
        if rest < row {
            return Ok(PairIndex { i, j: i + rest });
        }
        rest -= row;
    }
    unreachable!("rank checked against pair count")
}

/// All `K(K+1)/2` pairs in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairOrdering {
    files: usize,
    pairs: Vec<PairIndex>,
}

impl PairOrdering {
    pub fn new(files: usize) -> Self {
        let pairs = (1..=files)
            .flat_map(|i| (i..=files).map(move |j| PairIndex { i, j }))
            .collect();
        Self { files, pairs }
    }

    pub fn files(&self) -> usize {
        self.files
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PairIndex] {
        &self.pairs
    }

    pub fn get(&self, rank: usize) -> Option<PairIndex> {
        self.pairs.get(rank).copied()
    }
}

/// The user's request: a set of distinct pairs. Its size `P` is public.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairSet {
    files: usize,
    pairs: BTreeSet<PairIndex>,
}

impl PairSet {
    /// Rejects invalid or repeated pairs (`{i,j}` and `{j,i}` are the same).
    pub fn new<I>(files: usize, pairs: I) -> Result<Self, FieldError>
    where
        I: IntoIterator<Item = PairIndex>,
    {
        let mut set = BTreeSet::new();
        for p in pairs {
            let p = PairIndex::checked(p.i, p.j, files)?;
            if !set.insert(p) {
                return Err(FieldError::DuplicatePair { i: p.i, j: p.j });
            }
        }
        Ok(Self { files, pairs: set })
    }

    pub fn from_ranks<I>(files: usize, ranks: I) -> Result<Self, FieldError>
    where
        I: IntoIterator<Item = usize>,
    {
        let pairs = ranks
            .into_iter()
            .map(|r| pair_unrank(files, r))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(files, pairs)
    }

    pub fn files(&self) -> usize {
        self.files
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = PairIndex> + '_ {
        self.pairs.iter().copied()
    }

    /// Canonical ranks in increasing order.
    pub fn ranks(&self) -> Vec<usize> {
        self.pairs
            .iter()
            .map(|&p| pair_rank(self.files, p).expect("validated at construction"))
            .collect()
    }
}

/// `K` files of length `L` over `F(q)`, replicated on every server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Database {
    modulus: Modulus,
    files: usize,
    length: usize,
    /// row-major, `files * length` reduced symbols
    entries: Vec<u64>,
}

impl Database {
    pub fn from_rows(q: u64, rows: Vec<Vec<u64>>) -> Result<Self, FieldError> {
        let modulus = Modulus::new(q)?;
        let files = rows.len();
        let length = rows.first().map_or(0, Vec::len);
        if files == 0 || length == 0 {
            return Err(FieldError::EmptyDimensions { files, length });
        }
        let mut entries = Vec::with_capacity(files * length);
        for row in &rows {
            if row.len() != length {
                return Err(FieldError::LengthMismatch {
                    left: length,
                    right: row.len(),
                });
            }
            for &v in row {
                if v >= q {
                    return Err(FieldError::SymbolOutOfRange { value: v, modulus: q });
                }
                entries.push(v);
            }
        }
        Ok(Self {
            modulus,
            files,
            length,
            entries,
        })
    }

    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn files(&self) -> usize {
        self.files
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// File `k` (0-based) as raw reduced symbols.
    pub fn row(&self, k: usize) -> &[u64] {
        &self.entries[k * self.length..(k + 1) * self.length]
    }

    pub fn file(&self, k: usize) -> Vec<FieldElement> {
        self.row(k)
            .iter()
            .map(|&v| FieldElement::in_field(v, self.modulus))
            .collect()
    }

    pub fn get(&self, k: usize, l: usize) -> FieldElement {
        FieldElement::in_field(self.entries[k * self.length + l], self.modulus)
    }

    /// Returns a copy with one extra column appended.
    pub fn with_column(&self, column: &[u64]) -> Result<Self, FieldError> {
        if column.len() != self.files {
            return Err(FieldError::LengthMismatch {
                left: self.files,
                right: column.len(),
            });
        }
        let rows = (0..self.files)
            .map(|k| {
                let mut r = self.row(k).to_vec();
                r.push(self.modulus.reduce(column[k]));
                r
            })
            .collect();
        Self::from_rows(self.modulus.get(), rows)
    }

    /// Reads `q,K,L` on the first line, then `K` lines of `L` symbols each.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, FieldError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = records
            .next()
            .ok_or_else(|| FieldError::Parse("missing header line".into()))?
            .map_err(|e| FieldError::Parse(e.to_string()))?;
        if header.len() != 3 {
            return Err(FieldError::Parse(format!(
                "header must be `q,K,L`, got {} fields",
                header.len()
            )));
        }
        let q = parse_u64(&header[0], "q")?;
        let files = parse_u64(&header[1], "K")? as usize;
        let length = parse_u64(&header[2], "L")? as usize;
        if files == 0 || length == 0 {
            return Err(FieldError::EmptyDimensions { files, length });
        }
        let modulus = Modulus::new(q)?;
        let mut rows = Vec::with_capacity(files.min(1 << 16));
        for record in records {
            let record = record.map_err(|e| FieldError::Parse(e.to_string()))?;
            if record.len() == 1 && record[0].is_empty() {
                continue;
            }
            if rows.len() == files {
                return Err(FieldError::Parse(format!("more than K = {files} rows")));
            }
            if record.len() != length {
                return Err(FieldError::Parse(format!(
                    "row {} has {} symbols, expected L = {length}",
                    rows.len() + 1,
                    record.len()
                )));
            }
            let row = record
                .iter()
                .map(|s| parse_u64(s, "symbol"))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        if rows.len() != files {
            return Err(FieldError::Parse(format!(
                "expected K = {files} rows, found {}",
                rows.len()
            )));
        }
        Self::from_rows(modulus.get(), rows)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, FieldError> {
        Self::from_csv(text.as_bytes())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = format!("{},{},{}\n", self.modulus, self.files, self.length);
        for k in 0..self.files {
            let row: Vec<String> = self.row(k).iter().map(u64::to_string).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn parse_u64(s: &str, what: &str) -> Result<u64, FieldError> {
    s.parse::<u64>()
        .map_err(|_| FieldError::Parse(format!("{what}: `{s}` is not a non-negative integer")))
}

/// Pairwise inner products of a database in [`PairOrdering`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InnerProductVector {
    modulus: Modulus,
    files: usize,
    values: Vec<u64>,
}

impl InnerProductVector {
    pub fn new(modulus: Modulus, files: usize, values: Vec<u64>) -> Result<Self, FieldError> {
        if values.len() != pair_count(files) {
            return Err(FieldError::LengthMismatch {
                left: pair_count(files),
                right: values.len(),
            });
        }
        if let Some(&v) = values.iter().find(|&&v| v >= modulus.get()) {
            return Err(FieldError::SymbolOutOfRange {
                value: v,
                modulus: modulus.get(),
            });
        }
        Ok(Self { modulus, files, values })
    }

    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn files(&self) -> usize {
        self.files
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn get(&self, pair: PairIndex) -> Result<FieldElement, FieldError> {
        let r = pair_rank(self.files, pair)?;
        Ok(FieldElement::in_field(self.values[r], self.modulus))
    }
}

pub fn compute_table(db: &Database) -> InnerProductVector {
    let ordering = PairOrdering::new(db.files);
    let values = ordering
        .pairs()
        .iter()
        .map(|p| raw_inner_product(db.modulus, db.row(p.i - 1), db.row(p.j - 1)))
        .collect();
    InnerProductVector {
        modulus: db.modulus,
        files: db.files,
        values,
    }
}

/// Uniform i.i.d. symbols; the same seed always yields the same database.
pub fn random_database(q: u64, files: usize, length: usize, seed: u64) -> Result<Database, FieldError> {
    let modulus = Modulus::new(q)?;
    if files == 0 || length == 0 {
        return Err(FieldError::EmptyDimensions { files, length });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let entries = (0..files * length).map(|_| rng.random_range(0..q)).collect();
    Ok(Database {
        modulus,
        files,
        length,
        entries,
    })
}
