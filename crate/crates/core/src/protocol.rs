//! Simulated private retrieval from `N` replicated, non-colluding servers.
//!
//! Every inner product of the table is treated as a message of its own (a
//! *virtual file*). A single inner product is one field symbol, so a virtual
//! file is given length by batching: the same pair set is retrieved from `nu`
//! independent database instances, and symbol `s` of virtual file `r` is the
//! `r`-th table entry of instance `s`.
//!
//! A query to a server is a list of sums of subsymbols of distinct files; the
//! server answers each sum with its value in `F(q)`. The user decodes with a
//! linear recipe over the answers. Schemes differ only in how they build the
//! queries and recipes.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::capacity::{inverse_rate_achievable, inverse_rate_converse, BoundQuery, CapacityError};
use crate::field::{compute_table, pair_count, Database, FieldError, Modulus, PairSet};

/// Largest subpacketization `N^T` the repeated scheme will build.
pub const MAX_SUBPACKETIZATION: usize = 1 << 20;
/// Significance level of each pairwise chi-square test.
pub const AUDIT_SIGNIFICANCE: f64 = 1e-3;
/// Minimum number of samples per request set in sampled audits.
pub const MIN_AUDIT_SAMPLES: usize = 10_000;
/// Number of hash buckets for the index feature of sampled audits.
pub const INDEX_BUCKETS: u64 = 64;
/// Cap on enumerated outcomes per request set in exact audits.
pub const MAX_EXACT_OUTCOMES: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error("scheme `{scheme}` does not support these parameters: {reason}")]
    Unsupported { scheme: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("decoded value mismatch for virtual file {file}, symbol {symbol}")]
    DecodeMismatch { file: usize, symbol: usize },
    #[error("query references file {file}, symbol {symbol} outside the file space")]
    QueryOutOfRange { file: usize, symbol: usize },
    #[error("answer from server {server} has {got} symbols, expected {expected}")]
    AnswerLength { server: usize, got: usize, expected: usize },
    #[error("exact audit infeasible: {0}")]
    EnumerationInfeasible(String),
    #[error("sampled audit needs at least {MIN_AUDIT_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("no transcripts to measure")]
    NoTranscripts,
}

/// Per-run generator: the master seed selects the key, the run index the
/// stream, so adding runs never perturbs existing ones.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualFileSpace {
    /// Number of virtual files `T`.
    pub files: usize,
    pub modulus: Modulus,
    /// Symbols per virtual file.
    pub nu: usize,
}

impl VirtualFileSpace {
    pub fn new(files: usize, modulus: Modulus, nu: usize) -> Result<Self, ProtocolError> {
        if files == 0 || nu == 0 {
            return Err(ProtocolError::InvalidRequest(format!(
                "need T >= 1 and nu >= 1, got T = {files}, nu = {nu}"
            )));
        }
        Ok(Self { files, modulus, nu })
    }
}

/// Replicated content: `files × nu` symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualFiles {
    space: VirtualFileSpace,
    symbols: Vec<Vec<u64>>,
}

impl VirtualFiles {
    pub fn new(modulus: Modulus, symbols: Vec<Vec<u64>>) -> Result<Self, ProtocolError> {
        let nu = symbols.first().map_or(0, Vec::len);
        let space = VirtualFileSpace::new(symbols.len(), modulus, nu)?;
        for row in &symbols {
            if row.len() != nu {
                return Err(FieldError::LengthMismatch {
                    left: nu,
                    right: row.len(),
                }
                .into());
            }
            if let Some(&v) = row.iter().find(|&&v| v >= modulus.get()) {
                return Err(FieldError::SymbolOutOfRange {
                    value: v,
                    modulus: modulus.get(),
                }
                .into());
            }
        }
        Ok(Self { space, symbols })
    }

    /// Virtual file `r`, symbol `s` = table entry `r` of database `s`.
    pub fn from_databases(dbs: &[Database]) -> Result<Self, ProtocolError> {
        let first = dbs
            .first()
            .ok_or_else(|| ProtocolError::InvalidRequest("no database instances".into()))?;
        let (modulus, k) = (first.modulus(), first.files());
        let tables = dbs
            .iter()
            .map(|db| {
                if db.modulus() != modulus || db.files() != k {
                    return Err(ProtocolError::InvalidRequest(
                        "database instances disagree on q or K".into(),
                    ));
                }
                Ok(compute_table(db))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let symbols = (0..pair_count(k))
            .map(|r| tables.iter().map(|t| t.values()[r]).collect())
            .collect();
        Self::new(modulus, symbols)
    }

    pub fn random(space: VirtualFileSpace, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let q = space.modulus.get();
        let symbols = (0..space.files)
            .map(|_| (0..space.nu).map(|_| rng.random_range(0..q)).collect())
            .collect();
        Self { space, symbols }
    }

    pub fn space(&self) -> VirtualFileSpace {
        self.space
    }

    pub fn file(&self, r: usize) -> &[u64] {
        &self.symbols[r]
    }
}

/// One requested symbol: the sum of one subsymbol from each listed file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SumQuery {
    /// `(file, subsymbol)`, distinct files, sorted by file.
    pub terms: Vec<(usize, usize)>,
}

impl SumQuery {
    fn new(mut terms: Vec<(usize, usize)>) -> Self {
        terms.sort_unstable();
        Self { terms }
    }

    pub fn files(&self) -> impl Iterator<Item = usize> + '_ {
        self.terms.iter().map(|t| t.0)
    }
}

/// Everything one server sees.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ServerQuery {
    pub sums: Vec<SumQuery>,
}

impl ServerQuery {
    /// The server's deterministic response.
    pub fn evaluate(&self, files: &VirtualFiles) -> Result<Vec<u64>, ProtocolError> {
        let m = files.space.modulus;
        self.sums
            .iter()
            .map(|sum| {
                sum.terms.iter().try_fold(0u64, |acc, &(f, s)| {
                    let v = files
                        .symbols
                        .get(f)
                        .and_then(|row| row.get(s))
                        .ok_or(ProtocolError::QueryOutOfRange { file: f, symbol: s })?;
                    Ok(m.add(acc, *v))
                })
            })
            .collect()
    }

    /// Which files each sum touches, in emission order, e.g. `0|1|0+2`.
    pub fn file_pattern(&self) -> String {
        let mut out = String::new();
        for (i, sum) in self.sums.iter().enumerate() {
            if i > 0 {
                out.push('|');
            }
            for (j, f) in sum.files().enumerate() {
                if j > 0 {
                    out.push('+');
                }
                let _ = write!(out, "{f}");
            }
        }
        out
    }

    /// Full description including subsymbol indices, e.g. `0:3|1:0+2:5`.
    pub fn canonical_key(&self) -> String {
        let mut out = String::new();
        for (i, sum) in self.sums.iter().enumerate() {
            if i > 0 {
                out.push('|');
            }
            for (j, (f, s)) in sum.terms.iter().enumerate() {
                if j > 0 {
                    out.push('+');
                }
                let _ = write!(out, "{f}:{s}");
            }
        }
        out
    }

    pub fn index_bucket(&self, buckets: u64) -> u64 {
        let digest = Sha256::digest(self.canonical_key().as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(head) % buckets
    }
}

/// `value = Σ sign · answers[server][index]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub terms: Vec<(usize, usize, bool)>,
}

impl Recipe {
    fn single(server: usize, index: usize) -> Self {
        Self {
            terms: vec![(server, index, true)],
        }
    }

    fn apply(&self, m: Modulus, answers: &[Vec<u64>]) -> Option<u64> {
        self.terms.iter().try_fold(0u64, |acc, &(n, i, positive)| {
            let v = *answers.get(n)?.get(i)?;
            Some(if positive { m.add(acc, v) } else { m.sub(acc, v) })
        })
    }
}

/// Queries for every server plus the user's private decoding recipes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPlan {
    pub queries: Vec<ServerQuery>,
    /// `recipes[r][s]` recovers symbol `s` of the `r`-th requested file.
    pub recipes: Vec<Vec<Recipe>>,
}

impl QueryPlan {
    pub fn decode(&self, modulus: Modulus, answers: &[Vec<u64>]) -> Result<Vec<Vec<u64>>, ProtocolError> {
        for (n, (q, a)) in self.queries.iter().zip(answers).enumerate() {
            if q.sums.len() != a.len() {
                return Err(ProtocolError::AnswerLength {
                    server: n,
                    got: a.len(),
                    expected: q.sums.len(),
                });
            }
        }
        self.recipes
            .iter()
            .enumerate()
            .map(|(r, recipes)| {
                recipes
                    .iter()
                    .enumerate()
                    .map(|(s, recipe)| {
                        recipe
                            .apply(modulus, answers)
                            .ok_or(ProtocolError::DecodeMismatch { file: r, symbol: s })
                    })
                    .collect()
            })
            .collect()
    }
}

/// A retrieval scheme. The query for each server must have the same
/// distribution for every request set of the same size; answers are
/// [`ServerQuery::evaluate`]; decoding is the plan's recipes.
pub trait RetrievalScheme: Sync {
    fn name(&self) -> &str;

    fn check(&self, space: &VirtualFileSpace, servers: usize, requested: usize) -> Result<(), ProtocolError>;

    /// Symbols per virtual file the scheme is built for.
    fn native_subpacketization(&self, _files: usize, _servers: usize) -> Option<usize> {
        Some(1)
    }

    /// `request` holds distinct virtual-file indices in increasing order.
    fn plan(
        &self,
        space: &VirtualFileSpace,
        servers: usize,
        request: &[usize],
        rng: &mut ChaCha20Rng,
    ) -> Result<QueryPlan, ProtocolError>;

    /// Every equally likely outcome of the per-server queries, when the
    /// scheme's randomness is small enough to enumerate within `limit`.
    fn enumerate(
        &self,
        _space: &VirtualFileSpace,
        _servers: usize,
        _request: &[usize],
        _limit: usize,
    ) -> Option<Vec<Vec<ServerQuery>>> {
        None
    }
}

/// Server 1 sends everything; the others are idle.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullDownload;

impl FullDownload {
    fn fixed_plan(space: &VirtualFileSpace, servers: usize, request: &[usize]) -> QueryPlan {
        let mut queries = vec![ServerQuery::default(); servers];
        queries[0].sums = (0..space.files)
            .flat_map(|f| (0..space.nu).map(move |s| SumQuery::new(vec![(f, s)])))
            .collect();
        let recipes = request
            .iter()
            .map(|&f| (0..space.nu).map(|s| Recipe::single(0, f * space.nu + s)).collect())
            .collect();
        QueryPlan { queries, recipes }
    }
}

impl RetrievalScheme for FullDownload {
    fn name(&self) -> &str {
        "full_download"
    }

    fn check(&self, space: &VirtualFileSpace, servers: usize, requested: usize) -> Result<(), ProtocolError> {
        check_common(self.name(), space, servers, requested)
    }

    fn plan(
        &self,
        space: &VirtualFileSpace,
        servers: usize,
        request: &[usize],
        _rng: &mut ChaCha20Rng,
    ) -> Result<QueryPlan, ProtocolError> {
        self.check(space, servers, request.len())?;
        Ok(Self::fixed_plan(space, servers, request))
    }

    fn enumerate(
        &self,
        space: &VirtualFileSpace,
        servers: usize,
        request: &[usize],
        _limit: usize,
    ) -> Option<Vec<Vec<ServerQuery>>> {
        Some(vec![Self::fixed_plan(space, servers, request).queries])
    }
}

fn check_common(name: &str, space: &VirtualFileSpace, servers: usize, requested: usize) -> Result<(), ProtocolError> {
    if servers == 0 {
        return Err(ProtocolError::Unsupported {
            scheme: name.into(),
            reason: "need at least one server".into(),
        });
    }
    if requested == 0 || requested > space.files {
        return Err(ProtocolError::InvalidRequest(format!(
            "P = {requested} must lie in [1, T = {}]",
            space.files
        )));
    }
    Ok(())
}

/// An answered sum kept as side information: its answer index and terms.
type SideSum = (usize, Vec<(usize, usize)>);

/// One capacity-achieving single-message run per requested file.
///
/// Each file is split into `N^T` subsymbols under an independent uniform
/// relabeling. In round `t` every server is asked, for each `t`-subset of
/// files, `(N-1)^{t-1}` sums of one subsymbol per member. Sums over subsets
/// without the desired file use fresh subsymbols. Sums over subsets with it
/// combine a fresh desired subsymbol with an undesired `(t-1)`-sum that some
/// other server returned in the previous round, which the user subtracts.
#[derive(Debug, Clone, Copy)]
pub struct RepeatedPir {
    relabel: bool,
}

impl Default for RepeatedPir {
    fn default() -> Self {
        Self { relabel: true }
    }
}

impl RepeatedPir {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same structure without the random relabeling. Not private: subsymbol
    /// positions then reveal which file is desired. Used as a negative
    /// control for audits.
    pub fn without_relabeling() -> Self {
        Self { relabel: false }
    }

    pub fn subpacketization(files: usize, servers: usize) -> Option<usize> {
        let mut acc: usize = 1;
        for _ in 0..files {
            acc = acc.checked_mul(servers)?;
            if acc > MAX_SUBPACKETIZATION {
                return None;
            }
        }
        Some(acc)
    }

    /// Per-server download of one run, `Σ_t C(T,t)(N-1)^{t-1}`.
    pub fn per_server_download(files: usize, servers: usize) -> usize {
        (1..=files)
            .map(|t| binomial(files, t) * (servers - 1).pow(t as u32 - 1))
            .sum()
    }

    /// Builds one run with the given relabelings `perms[file]`. Sums are
    /// appended to `queries`; answer indices in recipes account for any sums
    /// already present.
    fn build_run(
        files: usize,
        servers: usize,
        desired: usize,
        perms: &[Vec<usize>],
        queries: &mut [ServerQuery],
    ) -> Vec<Recipe> {
        let nu = perms[desired].len();
        let mut next = vec![0usize; files];
        let take = |f: usize, next: &mut Vec<usize>| {
            let s = perms[f][next[f]];
            next[f] += 1;
            s
        };
        let mut recipes: Vec<Option<Recipe>> = vec![None; nu];
        // undesired sums of the previous round: (server, subset) -> [(answer index, terms)]
        let mut previous: HashMap<(usize, Vec<usize>), Vec<SideSum>> = HashMap::new();
        for t in 1..=files {
            let mut current = HashMap::new();
            for n in 0..servers {
                for subset in subsets(files, t) {
                    if subset.contains(&desired) {
                        let rest: Vec<usize> = subset.iter().copied().filter(|&f| f != desired).collect();
                        if t == 1 {
                            let s = take(desired, &mut next);
                            let idx = queries[n].sums.len();
                            queries[n].sums.push(SumQuery::new(vec![(desired, s)]));
                            recipes[s] = Some(Recipe::single(n, idx));
                            continue;
                        }
                        for other in (0..servers).filter(|&o| o != n) {
                            for (side_idx, side_terms) in previous.get(&(other, rest.clone())).into_iter().flatten() {
                                let s = take(desired, &mut next);
                                let mut terms = side_terms.clone();
                                terms.push((desired, s));
                                let idx = queries[n].sums.len();
                                queries[n].sums.push(SumQuery::new(terms));
                                recipes[s] = Some(Recipe {
                                    terms: vec![(n, idx, true), (other, *side_idx, false)],
                                });
                            }
                        }
                    } else {
                        let count = (servers - 1).pow(t as u32 - 1);
                        let entry: &mut Vec<_> = current.entry((n, subset.clone())).or_default();
                        for _ in 0..count {
                            let terms: Vec<(usize, usize)> = subset.iter().map(|&f| (f, take(f, &mut next))).collect();
                            let idx = queries[n].sums.len();
                            queries[n].sums.push(SumQuery::new(terms.clone()));
                            entry.push((idx, terms));
                        }
                    }
                }
            }
            previous = current;
        }
        recipes
            .into_iter()
            .map(|r| r.expect("every desired subsymbol is retrieved exactly once"))
            .collect()
    }

    fn plan_with_perms(
        space: &VirtualFileSpace,
        servers: usize,
        request: &[usize],
        perms: &[Vec<Vec<usize>>],
    ) -> QueryPlan {
        let mut queries = vec![ServerQuery::default(); servers];
        let recipes = request
            .iter()
            .zip(perms)
            .map(|(&desired, run_perms)| Self::build_run(space.files, servers, desired, run_perms, &mut queries))
            .collect();
        QueryPlan { queries, recipes }
    }
}

impl RetrievalScheme for RepeatedPir {
    fn name(&self) -> &str {
        if self.relabel {
            "repeated_pir"
        } else {
            "repeated_pir_unrelabeled"
        }
    }

    fn native_subpacketization(&self, files: usize, servers: usize) -> Option<usize> {
        Self::subpacketization(files, servers)
    }

    fn check(&self, space: &VirtualFileSpace, servers: usize, requested: usize) -> Result<(), ProtocolError> {
        check_common(self.name(), space, servers, requested)?;
        let unsupported = |reason: String| ProtocolError::Unsupported {
            scheme: self.name().into(),
            reason,
        };
        if servers < 2 {
            return Err(unsupported("needs N >= 2".into()));
        }
        match Self::subpacketization(space.files, servers) {
            Some(nu) if nu == space.nu => Ok(()),
            Some(nu) => Err(unsupported(format!("needs nu = N^T = {nu}, got {}", space.nu))),
            None => Err(unsupported(format!(
                "N^T exceeds the subpacketization limit {MAX_SUBPACKETIZATION}"
            ))),
        }
    }

    fn plan(
        &self,
        space: &VirtualFileSpace,
        servers: usize,
        request: &[usize],
        rng: &mut ChaCha20Rng,
    ) -> Result<QueryPlan, ProtocolError> {
        self.check(space, servers, request.len())?;
        let perms: Vec<Vec<Vec<usize>>> = request
            .iter()
            .map(|_| {
                (0..space.files)
                    .map(|_| {
                        let mut p: Vec<usize> = (0..space.nu).collect();
                        if self.relabel {
                            p.shuffle(rng);
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        Ok(Self::plan_with_perms(space, servers, request, &perms))
    }

    fn enumerate(
        &self,
        space: &VirtualFileSpace,
        servers: usize,
        request: &[usize],
        limit: usize,
    ) -> Option<Vec<Vec<ServerQuery>>> {
        self.check(space, servers, request.len()).ok()?;
        let per_file: Vec<Vec<usize>> = if self.relabel {
            (1..=space.nu).try_fold(1usize, |a, b| a.checked_mul(b).filter(|&v| v <= limit))?;
            permutations(space.nu)
        } else {
            vec![(0..space.nu).collect()]
        };
        let slots = space.files * request.len();
        let total = (0..slots).try_fold(1usize, |a, _| a.checked_mul(per_file.len()).filter(|&v| v <= limit))?;
        let mut out = Vec::with_capacity(total);
        let mut choice = vec![0usize; slots];
        loop {
            let perms: Vec<Vec<Vec<usize>>> = (0..request.len())
                .map(|r| {
                    (0..space.files)
                        .map(|f| per_file[choice[r * space.files + f]].clone())
                        .collect()
                })
                .collect();
            out.push(Self::plan_with_perms(space, servers, request, &perms).queries);
            // odometer over the per-slot permutation choices
            let mut pos = 0;
            loop {
                if pos == slots {
                    return Some(out);
                }
                choice[pos] += 1;
                if choice[pos] < per_file.len() {
                    break;
                }
                choice[pos] = 0;
                pos += 1;
            }
        }
    }
}

/// Asks server 1 directly for the requested files. Correct but not private:
/// a negative control for audits.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlaintextRequest;

impl RetrievalScheme for PlaintextRequest {
    fn name(&self) -> &str {
        "plaintext"
    }

    fn check(&self, space: &VirtualFileSpace, servers: usize, requested: usize) -> Result<(), ProtocolError> {
        check_common(self.name(), space, servers, requested)
    }

    fn plan(
        &self,
        space: &VirtualFileSpace,
        servers: usize,
        request: &[usize],
        _rng: &mut ChaCha20Rng,
    ) -> Result<QueryPlan, ProtocolError> {
        self.check(space, servers, request.len())?;
        Ok(plaintext_plan(space, servers, request))
    }

    fn enumerate(
        &self,
        space: &VirtualFileSpace,
        servers: usize,
        request: &[usize],
        _limit: usize,
    ) -> Option<Vec<Vec<ServerQuery>>> {
        Some(vec![plaintext_plan(space, servers, request).queries])
    }
}

fn plaintext_plan(space: &VirtualFileSpace, servers: usize, request: &[usize]) -> QueryPlan {
    let mut queries = vec![ServerQuery::default(); servers];
    let mut recipes = Vec::new();
    for &f in request {
        let mut file_recipes = Vec::new();
        for s in 0..space.nu {
            file_recipes.push(Recipe::single(0, queries[0].sums.len()));
            queries[0].sums.push(SumQuery::new(vec![(f, s)]));
        }
        recipes.push(file_recipes);
    }
    QueryPlan { queries, recipes }
}

/// Looks up a scheme by its command-line name.
pub fn scheme_by_name(name: &str) -> Option<Box<dyn RetrievalScheme>> {
    match name {
        "full_download" => Some(Box::new(FullDownload)),
        "repeated_pir" => Some(Box::new(RepeatedPir::new())),
        "repeated_pir_unrelabeled" => Some(Box::new(RepeatedPir::without_relabeling())),
        "plaintext" => Some(Box::new(PlaintextRequest)),
        _ => None,
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k.min(n - k)).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// All `t`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, t: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, t: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == t {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < t - cur.len() {
                break;
            }
            cur.push(i);
            go(i + 1, n, t, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, t, &mut Vec::new(), &mut out);
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(rest: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            cur.push(v);
            go(rest, cur, out);
            cur.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    go(&mut (0..n).collect(), &mut Vec::new(), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTranscript {
    pub scheme: String,
    pub seed: u64,
    pub servers: usize,
    pub files: usize,
    pub nu: usize,
    pub request: Vec<usize>,
    pub queries: Vec<ServerQuery>,
    pub answers: Vec<Vec<u64>>,
    /// Total field symbols returned by all servers.
    pub downloaded: usize,
    pub decoded: Vec<Vec<u64>>,
}

impl RetrievalTranscript {
    pub fn inverse_rate(&self) -> f64 {
        self.downloaded as f64 / (self.request.len() * self.nu) as f64
    }

    pub fn per_server_download(&self) -> Vec<usize> {
        self.answers.iter().map(Vec::len).collect()
    }
}

fn normalize_request(space: &VirtualFileSpace, request: &[usize]) -> Result<Vec<usize>, ProtocolError> {
    let mut sorted = request.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != request.len() {
        return Err(ProtocolError::InvalidRequest("repeated file in request".into()));
    }
    if let Some(&f) = sorted.iter().find(|&&f| f >= space.files) {
        return Err(ProtocolError::InvalidRequest(format!(
            "file {f} outside [0, T = {})",
            space.files
        )));
    }
    if sorted.is_empty() {
        return Err(ProtocolError::InvalidRequest("empty request".into()));
    }
    Ok(sorted)
}

/// Runs one retrieval and checks every decoded symbol against the stored
/// files. Decoding errors are hard failures.
pub fn run_retrieval(
    scheme: &dyn RetrievalScheme,
    files: &VirtualFiles,
    servers: usize,
    request: &[usize],
    seed: u64,
) -> Result<RetrievalTranscript, ProtocolError> {
    let space = files.space();
    let request = normalize_request(&space, request)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let plan = scheme.plan(&space, servers, &request, &mut rng)?;
    // servers only see their own query and the replicated files
    let answers = plan
        .queries
        .par_iter()
        .map(|q| q.evaluate(files))
        .collect::<Result<Vec<_>, _>>()?;
    let decoded = plan.decode(space.modulus, &answers)?;
    for (r, (&f, values)) in request.iter().zip(&decoded).enumerate() {
        if values.len() != space.nu {
            return Err(ProtocolError::DecodeMismatch {
                file: r,
                symbol: values.len(),
            });
        }
        if let Some(s) = values.iter().zip(files.file(f)).position(|(a, b)| a != b) {
            return Err(ProtocolError::DecodeMismatch { file: f, symbol: s });
        }
    }
    Ok(RetrievalTranscript {
        scheme: scheme.name().to_string(),
        seed,
        servers,
        files: space.files,
        nu: space.nu,
        request,
        downloaded: answers.iter().map(Vec::len).sum(),
        queries: plan.queries,
        answers,
        decoded,
    })
}

/// Retrieves a pair set from `nu` database instances and checks the result
/// against the directly computed tables.
pub fn run_pair_retrieval(
    scheme: &dyn RetrievalScheme,
    dbs: &[Database],
    servers: usize,
    pairs: &PairSet,
    seed: u64,
) -> Result<RetrievalTranscript, ProtocolError> {
    let files = VirtualFiles::from_databases(dbs)?;
    if pairs.files() != dbs[0].files() {
        return Err(ProtocolError::InvalidRequest(format!(
            "pair set is over K = {}, databases have K = {}",
            pairs.files(),
            dbs[0].files()
        )));
    }
    let transcript = run_retrieval(scheme, &files, servers, &pairs.ranks(), seed)?;
    for (s, db) in dbs.iter().enumerate() {
        let truth = compute_table(db);
        for (r, &rank) in transcript.request.iter().enumerate() {
            if transcript.decoded[r][s] != truth.values()[rank] {
                return Err(ProtocolError::DecodeMismatch { file: rank, symbol: s });
            }
        }
    }
    Ok(transcript)
}

/// `count` independent runs with per-run seeds split from `master`.
pub fn run_many(
    scheme: &dyn RetrievalScheme,
    files: &VirtualFiles,
    servers: usize,
    request: &[usize],
    master: u64,
    count: usize,
) -> Result<Vec<RetrievalTranscript>, ProtocolError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            use rand::RngCore;
            let seed = stream_rng(master, i).next_u64();
            run_retrieval(scheme, files, servers, request, seed)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMeasurement {
    /// Total download over total requested symbols, one rounding only.
    pub inverse_rate: f64,
    pub transcripts: usize,
    pub files: usize,
    pub requested: usize,
    pub servers: usize,
    /// Converse formula at `(T, P, N)`.
    pub converse: f64,
    /// Achievable formula at `(T, P, N)`.
    pub achievable: f64,
    /// `inverse_rate - converse`; never negative for a private scheme.
    pub gap: f64,
}

pub fn measure_rate(transcripts: &[RetrievalTranscript]) -> Result<RateMeasurement, ProtocolError> {
    let first = transcripts.first().ok_or(ProtocolError::NoTranscripts)?;
    let downloaded: usize = transcripts.iter().map(|t| t.downloaded).sum();
    let wanted: usize = transcripts.iter().map(|t| t.request.len() * t.nu).sum();
    let inverse_rate = downloaded as f64 / wanted as f64;
    let bq = BoundQuery::new(first.files, first.request.len(), first.servers)?;
    let converse = inverse_rate_converse(&bq);
    let achievable = inverse_rate_achievable(&bq)?;
    Ok(RateMeasurement {
        inverse_rate,
        transcripts: transcripts.len(),
        files: first.files,
        requested: first.request.len(),
        servers: first.servers,
        converse,
        achievable,
        gap: inverse_rate - converse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMode {
    Exact,
    Sampled { samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditFeature {
    /// Files touched by each sum, in order.
    FilePattern,
    /// Hash bucket of the full query including subsymbol indices.
    IndexBucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub server: usize,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub feature: AuditFeature,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAuditReport {
    pub scheme: String,
    pub files: usize,
    pub servers: usize,
    pub requested: usize,
    pub mode: AuditMode,
    pub request_sets: usize,
    /// Largest total-variation distance between per-server query laws
    /// (exact mode).
    pub max_tv: Option<f64>,
    pub tests: Vec<PairwiseTest>,
    /// Every server returns the same number of symbols for every request.
    pub download_symmetric: bool,
    pub passed: bool,
}

/// Two-sample chi-square homogeneity test on category counts.
pub fn chi_square_two_sample<K: Ord>(left: &BTreeMap<K, u64>, right: &BTreeMap<K, u64>) -> (f64, usize, f64) {
    let na: u64 = left.values().sum();
    let nb: u64 = right.values().sum();
    if na == 0 || nb == 0 {
        return (0.0, 0, 1.0);
    }
    let (ra, rb) = ((nb as f64 / na as f64).sqrt(), (na as f64 / nb as f64).sqrt());
    let mut stat = 0.0;
    let mut categories = 0usize;
    let keys: std::collections::BTreeSet<&K> = left.keys().chain(right.keys()).collect();
    for k in keys {
        let a = *left.get(k).unwrap_or(&0) as f64;
        let b = *right.get(k).unwrap_or(&0) as f64;
        if a + b == 0.0 {
            continue;
        }
        categories += 1;
        stat += (a * ra - b * rb).powi(2) / (a + b);
    }
    let dof = categories.saturating_sub(1);
    if dof == 0 {
        return (stat, 0, 1.0);
    }
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    (stat, dof, dist.sf(stat))
}

/// All request sets of size `P` over `T` virtual files.
pub fn request_sets(files: usize, requested: usize) -> Vec<Vec<usize>> {
    subsets(files, requested)
}

#[derive(Default)]
struct ServerHistogram {
    pattern: BTreeMap<String, u64>,
    bucket: BTreeMap<u64, u64>,
    counts: BTreeMap<usize, u64>,
}

impl ServerHistogram {
    fn merge(mut self, other: Self) -> Self {
        for (k, v) in other.pattern {
            *self.pattern.entry(k).or_default() += v;
        }
        for (k, v) in other.bucket {
            *self.bucket.entry(k).or_default() += v;
        }
        for (k, v) in other.counts {
            *self.counts.entry(k).or_default() += v;
        }
        self
    }
}

/// Checks that each server's query law does not depend on the request set.
///
/// Exact mode enumerates the scheme's randomness and reports the largest
/// total-variation distance (must be zero). Sampled mode draws `samples`
/// plans per request set and runs pairwise two-sample chi-square tests on two
/// features of every server's query: its file pattern and a hash bucket of
/// its full content.
pub fn audit_privacy(
    scheme: &dyn RetrievalScheme,
    space: &VirtualFileSpace,
    servers: usize,
    requested: usize,
    mode: AuditMode,
    seed: u64,
) -> Result<PrivacyAuditReport, ProtocolError> {
    scheme.check(space, servers, requested)?;
    let sets = request_sets(space.files, requested);
    match mode {
        AuditMode::Exact => audit_exact(scheme, space, servers, requested, &sets),
        AuditMode::Sampled { samples } => {
            if samples < MIN_AUDIT_SAMPLES {
                return Err(ProtocolError::TooFewSamples(samples));
            }
            audit_sampled(scheme, space, servers, requested, &sets, samples, seed)
        }
    }
}

fn audit_exact(
    scheme: &dyn RetrievalScheme,
    space: &VirtualFileSpace,
    servers: usize,
    requested: usize,
    sets: &[Vec<usize>],
) -> Result<PrivacyAuditReport, ProtocolError> {
    let mut laws: Vec<Vec<HashMap<String, f64>>> = Vec::with_capacity(sets.len());
    let mut counts: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); servers];
    for set in sets {
        let outcomes = scheme
            .enumerate(space, servers, set, MAX_EXACT_OUTCOMES)
            .ok_or_else(|| {
                ProtocolError::EnumerationInfeasible(format!(
                    "scheme `{}` randomness exceeds {MAX_EXACT_OUTCOMES} outcomes or is not enumerable",
                    scheme.name()
                ))
            })?;
        let weight = 1.0 / outcomes.len() as f64;
        let mut per_server = vec![HashMap::new(); servers];
        for outcome in &outcomes {
            for (n, q) in outcome.iter().enumerate() {
                *per_server[n].entry(q.canonical_key()).or_insert(0.0) += weight;
                counts[n].insert(q.sums.len());
            }
        }
        laws.push(per_server);
    }
    let mut max_tv: f64 = 0.0;
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            for n in 0..servers {
                let (la, lb) = (&laws[a][n], &laws[b][n]);
                let keys: std::collections::HashSet<&String> = la.keys().chain(lb.keys()).collect();
                let tv = 0.5
                    * keys
                        .into_iter()
                        .map(|k| (la.get(k).unwrap_or(&0.0) - lb.get(k).unwrap_or(&0.0)).abs())
                        .sum::<f64>();
                max_tv = max_tv.max(tv);
            }
        }
    }
    let download_symmetric = counts.iter().all(|c| c.len() <= 1);
    Ok(PrivacyAuditReport {
        scheme: scheme.name().to_string(),
        files: space.files,
        servers,
        requested,
        mode: AuditMode::Exact,
        request_sets: sets.len(),
        max_tv: Some(max_tv),
        tests: Vec::new(),
        download_symmetric,
        // probabilities are sums of equal weights; allow rounding only
        passed: max_tv < 1e-9 && download_symmetric,
    })
}

fn audit_sampled(
    scheme: &dyn RetrievalScheme,
    space: &VirtualFileSpace,
    servers: usize,
    requested: usize,
    sets: &[Vec<usize>],
    samples: usize,
    seed: u64,
) -> Result<PrivacyAuditReport, ProtocolError> {
    const CHUNK: usize = 1024;
    let mut histograms: Vec<Vec<ServerHistogram>> = Vec::with_capacity(sets.len());
    for (set_index, set) in sets.iter().enumerate() {
        let chunks = samples.div_ceil(CHUNK);
        let per_chunk = (0..chunks)
            .into_par_iter()
            .map(|c| {
                // stream = set index in the high bits, chunk in the low bits
                let mut rng = stream_rng(seed, ((set_index as u64) << 32) | c as u64);
                let mut local: Vec<ServerHistogram> = (0..servers).map(|_| ServerHistogram::default()).collect();
                for _ in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                    let plan = scheme.plan(space, servers, set, &mut rng)?;
                    for (n, q) in plan.queries.iter().enumerate() {
                        *local[n].pattern.entry(q.file_pattern()).or_default() += 1;
                        *local[n].bucket.entry(q.index_bucket(INDEX_BUCKETS)).or_default() += 1;
                        *local[n].counts.entry(q.sums.len()).or_default() += 1;
                    }
                }
                Ok(local)
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        let merged = per_chunk.into_iter().fold(
            (0..servers).map(|_| ServerHistogram::default()).collect::<Vec<_>>(),
            |acc, local| acc.into_iter().zip(local).map(|(a, b)| a.merge(b)).collect(),
        );
        histograms.push(merged);
    }
    let mut tests = Vec::new();
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            for n in 0..servers {
                let (ha, hb) = (&histograms[a][n], &histograms[b][n]);
                let (stat, dof, p) = chi_square_two_sample(&ha.pattern, &hb.pattern);
                tests.push(PairwiseTest {
                    server: n,
                    left: sets[a].clone(),
                    right: sets[b].clone(),
                    feature: AuditFeature::FilePattern,
                    statistic: stat,
                    dof,
                    p_value: p,
                    passed: p >= AUDIT_SIGNIFICANCE,
                });
                let (stat, dof, p) = chi_square_two_sample(&ha.bucket, &hb.bucket);
                tests.push(PairwiseTest {
                    server: n,
                    left: sets[a].clone(),
                    right: sets[b].clone(),
                    feature: AuditFeature::IndexBucket,
                    statistic: stat,
                    dof,
                    p_value: p,
                    passed: p >= AUDIT_SIGNIFICANCE,
                });
            }
        }
    }
    let download_symmetric = (0..servers).all(|n| {
        let first = histograms[0][n].counts.keys().collect::<Vec<_>>();
        first.len() == 1
            && histograms
                .iter()
                .all(|h| h[n].counts.keys().collect::<Vec<_>>() == first)
    });
    let passed = download_symmetric && tests.iter().all(|t| t.passed);
    Ok(PrivacyAuditReport {
        scheme: scheme.name().to_string(),
        files: space.files,
        servers,
        requested,
        mode: AuditMode::Sampled { samples },
        request_sets: sets.len(),
        max_tv: None,
        tests,
        download_symmetric,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(t: usize, q: u64, nu: usize) -> VirtualFileSpace {
        VirtualFileSpace::new(t, Modulus::new(q).unwrap(), nu).unwrap()
    }

    #[test]
    fn combinatorics() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(3, 0), 1);
        assert_eq!(binomial(2, 3), 0);
        assert_eq!(subsets(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(RepeatedPir::per_server_download(3, 2), 7);
        assert_eq!(RepeatedPir::per_server_download(2, 2), 3);
    }

    #[test]
    fn full_download_counts() {
        let sp = space(3, 5, 1);
        let files = VirtualFiles::random(sp, 1);
        let t = run_retrieval(&FullDownload, &files, 2, &[0, 2], 7).unwrap();
        assert_eq!(t.downloaded, 3);
        assert_eq!(t.inverse_rate(), 1.5);
        assert_eq!(t.per_server_download(), vec![3, 0]);
    }

    #[test]
    fn full_download_query_is_constant() {
        let sp = space(3, 5, 2);
        let mut rng = stream_rng(0, 0);
        let a = FullDownload.plan(&sp, 2, &[0, 1], &mut rng).unwrap();
        let b = FullDownload.plan(&sp, 2, &[1, 2], &mut rng).unwrap();
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn repeated_pir_two_files_layout() {
        // the classic a1, b1, a2+b2 layout per server
        let sp = space(2, 2, 4);
        let mut rng = stream_rng(3, 0);
        let plan = RepeatedPir::new().plan(&sp, 2, &[0], &mut rng).unwrap();
        for q in &plan.queries {
            assert_eq!(q.file_pattern(), "0|1|0+1");
        }
    }

    #[test]
    fn repeated_pir_counts() {
        let sp = space(3, 5, 8);
        let files = VirtualFiles::random(sp, 11);
        let t = run_retrieval(&RepeatedPir::new(), &files, 2, &[1], 5).unwrap();
        assert_eq!(t.per_server_download(), vec![7, 7]);
        assert_eq!(t.downloaded, 14);
        assert_eq!(t.inverse_rate(), 1.75);
        let t = run_retrieval(&RepeatedPir::new(), &files, 2, &[0, 2], 5).unwrap();
        assert_eq!(t.inverse_rate(), 1.75);
    }

    #[test]
    fn repeated_pir_rejects_wrong_subpacketization() {
        let sp = space(3, 5, 4);
        let err = RepeatedPir::new().check(&sp, 2, 1).unwrap_err();
        assert!(matches!(err, ProtocolError::Unsupported { .. }));
        assert!(RepeatedPir::new().check(&space(3, 5, 1), 1, 1).is_err());
    }

    #[test]
    fn request_validation() {
        let sp = space(3, 5, 1);
        let files = VirtualFiles::random(sp, 1);
        assert!(run_retrieval(&FullDownload, &files, 2, &[], 0).is_err());
        assert!(run_retrieval(&FullDownload, &files, 2, &[1, 1], 0).is_err());
        assert!(run_retrieval(&FullDownload, &files, 2, &[3], 0).is_err());
        assert!(run_retrieval(&FullDownload, &files, 0, &[0], 0).is_err());
    }

    #[test]
    fn chi_square_identical_and_disjoint() {
        let a: BTreeMap<u8, u64> = [(0, 50), (1, 50)].into();
        let (stat, dof, p) = chi_square_two_sample(&a, &a);
        assert_eq!((stat, dof, p), (0.0, 1, 1.0));
        let b: BTreeMap<u8, u64> = [(2, 100)].into();
        let (_, dof, p) = chi_square_two_sample(&a, &b);
        assert_eq!(dof, 2);
        assert!(p < 1e-10);
        let c: BTreeMap<u8, u64> = [(0, 100)].into();
        assert_eq!(chi_square_two_sample(&c, &c), (0.0, 0, 1.0));
    }

    #[test]
    fn exact_audit_full_download_and_plaintext() {
        let sp = space(3, 2, 1);
        let r = audit_privacy(&FullDownload, &sp, 2, 2, AuditMode::Exact, 0).unwrap();
        assert_eq!(r.max_tv, Some(0.0));
        assert!(r.passed);
        let r = audit_privacy(&PlaintextRequest, &sp, 2, 1, AuditMode::Exact, 0).unwrap();
        assert_eq!(r.max_tv, Some(1.0));
        assert!(!r.passed);
    }

    #[test]
    fn exact_audit_repeated_pir_small() {
        let sp = space(2, 3, 4);
        let r = audit_privacy(&RepeatedPir::new(), &sp, 2, 1, AuditMode::Exact, 0).unwrap();
        assert!(r.max_tv.unwrap() < 1e-12, "{:?}", r.max_tv);
        assert!(r.passed);
        let r = audit_privacy(&RepeatedPir::without_relabeling(), &sp, 2, 1, AuditMode::Exact, 0).unwrap();
        assert!(!r.passed);
        let too_big = space(3, 2, 8);
        assert!(matches!(
            audit_privacy(&RepeatedPir::new(), &too_big, 2, 1, AuditMode::Exact, 0),
            Err(ProtocolError::EnumerationInfeasible(_))
        ));
    }

    #[test]
    fn sampled_audit_needs_samples() {
        let sp = space(3, 2, 8);
        assert_eq!(
            audit_privacy(&RepeatedPir::new(), &sp, 2, 1, AuditMode::Sampled { samples: 10 }, 0),
            Err(ProtocolError::TooFewSamples(10))
        );
    }

    #[test]
    fn measure_rate_needs_transcripts() {
        assert_eq!(measure_rate(&[]), Err(ProtocolError::NoTranscripts));
    }
}
