//! Monotone collections, the function g_𝒜(s) = P(W^(s) ∉ 𝒜̄) and its
//! smallest fixed point, generation-size curves g_{k,a}, the supremum form
//! for random *-trees, and a *-tree whose root and supremum g differ.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::branching::{GwRealization, McEstimate, OffspringDistribution, RandomTree};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, trial_rng};
use crate::symbolic::{le_tol, pi_section, Letter, Section, Weights, Word, DEFAULT_NODE_BUDGET};

/// Outcome of monotone iteration q_{n+1} = f(q_n) from q_0 = 0.
#[derive(Clone, Debug, Serialize)]
pub struct Iteration {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The first iterates q_1, q_2, ... (at most 64 kept).
    pub trace: Vec<f64>,
}

pub fn iterate_from_zero(f: impl Fn(f64) -> f64, tol: f64, max_iter: usize) -> Iteration {
    let mut q = 0.0;
    let mut trace = Vec::new();
    for n in 1..=max_iter {
        let next = f(q);
        if trace.len() < 64 {
            trace.push(next);
        }
        let step = (next - q).abs();
        q = next;
        if step < tol {
            return Iteration { value: q, iterations: n, converged: true, trace };
        }
    }
    Iteration { value: q, iterations: max_iter, converged: false, trace }
}

type Oracle = Arc<dyn Fn(&[Letter]) -> bool + Send + Sync>;

/// A family of label sets closed under taking supersets, given by its
/// minimal members or by a membership oracle for its closure.
#[derive(Clone)]
pub enum MonotoneCollection {
    /// Every set, including ∅.
    TrivialAll,
    /// Sets with at least `a` elements.
    Ary(usize),
    /// Supersets of at least one generator.
    Generators(Vec<Vec<Letter>>),
    /// An opaque closure-membership oracle.
    Oracle { name: String, member: Oracle },
}

impl fmt::Debug for MonotoneCollection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MonotoneCollection::TrivialAll => f.write_str("TrivialAll"),
            MonotoneCollection::Ary(a) => write!(f, "Ary({a})"),
            MonotoneCollection::Generators(g) => write!(f, "Generators({g:?})"),
            MonotoneCollection::Oracle { name, .. } => write!(f, "Oracle({name})"),
        }
    }
}

impl MonotoneCollection {
    /// Collection generated by `sets`; any empty generator makes it trivial.
    pub fn generators(sets: Vec<Vec<Letter>>) -> Self {
        if sets.iter().any(Vec::is_empty) {
            return MonotoneCollection::TrivialAll;
        }
        let mut sets: Vec<Vec<Letter>> = sets
            .into_iter()
            .map(|mut s| {
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect();
        sets.sort();
        sets.dedup();
        MonotoneCollection::Generators(sets)
    }

    pub fn oracle(name: impl Into<String>, member: impl Fn(&[Letter]) -> bool + Send + Sync + 'static) -> Self {
        MonotoneCollection::Oracle { name: name.into(), member: Arc::new(member) }
    }

    pub fn is_trivial(&self) -> bool {
        match self {
            MonotoneCollection::TrivialAll => true,
            MonotoneCollection::Ary(a) => *a == 0,
            MonotoneCollection::Generators(_) => false,
            MonotoneCollection::Oracle { member, .. } => member(&[]),
        }
    }

    /// Minimum cardinality when the collection is a cardinality class.
    pub fn cardinality(&self) -> Option<usize> {
        match self {
            MonotoneCollection::Ary(a) => Some(*a),
            MonotoneCollection::TrivialAll => Some(0),
            _ => None,
        }
    }

    /// Membership of `set` in the closure 𝒜̄.
    pub fn closure_member(&self, set: &[Letter]) -> bool {
        match self {
            MonotoneCollection::TrivialAll => true,
            MonotoneCollection::Ary(a) => {
                let mut s = set.to_vec();
                s.sort_unstable();
                s.dedup();
                s.len() >= *a
            }
            MonotoneCollection::Generators(gens) => {
                let mut s = set.to_vec();
                s.sort_unstable();
                gens.iter()
                    .any(|g| g.iter().all(|x| s.binary_search(x).is_ok()))
            }
            MonotoneCollection::Oracle { member, .. } => {
                if member(&[]) {
                    return true;
                }
                let mut s = set.to_vec();
                s.sort_unstable();
                s.dedup();
                member(&s)
            }
        }
    }

    /// Search for a violation of monotonicity by adding single letters to
    /// random members. Returns the offending pair if one is found.
    pub fn find_monotonicity_violation(
        &self,
        alphabet: u32,
        samples: usize,
        seed: u64,
    ) -> Option<(Vec<Letter>, Vec<Letter>)> {
        let mut rng = trial_rng(seed, 0);
        for _ in 0..samples {
            let s: Vec<Letter> = (0..alphabet).filter(|_| rng.random::<bool>()).collect();
            if !self.closure_member(&s) {
                continue;
            }
            let extra = rng.random_range(0..alphabet);
            let mut t = s.clone();
            if !t.contains(&extra) {
                t.push(extra);
                t.sort_unstable();
            }
            if !self.closure_member(&t) {
                return Some((s, t));
            }
        }
        None
    }
}

/// JSON/CLI description of a collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CollectionSpec {
    Ary { a: usize },
    Generators { sets: Vec<Vec<Letter>> },
    DiffuseBlock {
        b: u32,
        k: usize,
        #[serde(default = "default_dim")]
        d: u32,
    },
}

fn default_dim() -> u32 {
    2
}

impl CollectionSpec {
    /// Parse `ary:A`, `block:B:K[:D]`, `gens:0,1;2`, or a JSON document.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return Ok(serde_json::from_str(s)?);
        }
        let bad = || Error::invalid(format!("cannot parse collection {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<u64> {
            parts.get(i).and_then(|x| x.parse().ok()).ok_or_else(bad)
        };
        match parts[0] {
            "ary" => Ok(CollectionSpec::Ary { a: num(1)? as usize }),
            "block" => Ok(CollectionSpec::DiffuseBlock {
                b: num(1)? as u32,
                k: num(2)? as usize,
                d: if parts.len() > 3 { num(3)? as u32 } else { 2 },
            }),
            "gens" => {
                let body = parts.get(1).ok_or_else(bad)?;
                let sets = body
                    .split(';')
                    .map(|g| {
                        if g.is_empty() {
                            Ok(Vec::new())
                        } else {
                            g.split(',')
                                .map(|x| x.parse::<Letter>().map_err(|_| bad()))
                                .collect::<Result<Vec<_>>>()
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CollectionSpec::Generators { sets })
            }
            _ => Err(bad()),
        }
    }

    pub fn resolve(&self) -> Result<MonotoneCollection> {
        Ok(match self {
            CollectionSpec::Ary { a } => MonotoneCollection::Ary(*a),
            CollectionSpec::Generators { sets } => MonotoneCollection::generators(sets.clone()),
            CollectionSpec::DiffuseBlock { b, k, d } => {
                crate::extraction::diffuse_block_collection(*b, *d, *k)?
            }
        })
    }
}

/// How a [`GFunction`] is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    ClosedForm,
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Minimum Monte Carlo sample size for g evaluations.
pub const MIN_MC_SAMPLES: usize = 100_000;

type Sampler = Arc<dyn Fn(&mut ChaCha8Rng) -> Vec<Letter> + Send + Sync>;

/// Law of the child-label set on which g is evaluated.
#[derive(Clone)]
pub enum ChildLaw {
    Offspring(OffspringDistribution),
    /// Arbitrary sampler (for example a compressed offspring law).
    Sampler { alphabet: u32, sample: Sampler },
}

impl fmt::Debug for ChildLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChildLaw::Offspring(o) => write!(f, "{o:?}"),
            ChildLaw::Sampler { alphabet, .. } => write!(f, "Sampler(alphabet {alphabet})"),
        }
    }
}

enum Evaluator {
    ClosedForm { n: u32, p: f64, a: usize },
    ProductSizes { p: Vec<f64>, a: usize },
    ProductMasks { p: Vec<f64>, non_members: Vec<u32> },
    Table { rows: Vec<(f64, Vec<u64>)> },
    Mc { pool: Vec<(Vec<Letter>, Vec<f64>)> },
}

/// g_𝒜(s) = P(W^(s) ∉ 𝒜̄) for a child law and a monotone collection.
#[derive(Clone)]
pub struct GFunction {
    pub law: ChildLaw,
    pub collection: MonotoneCollection,
    pub strategy: Strategy,
    eval: Arc<Evaluator>,
}

impl fmt::Debug for GFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GFunction")
            .field("law", &self.law)
            .field("collection", &self.collection)
            .field("strategy", &self.strategy)
            .finish()
    }
}

/// A value of g with a standard error when it was estimated.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct GValue {
    pub value: f64,
    pub std_err: Option<f64>,
}

const EXACT_ALPHABET_LIMIT: u32 = 20;

impl GFunction {
    /// Pick the cheapest exact strategy, falling back to Monte Carlo.
    pub fn new(offspring: OffspringDistribution, collection: MonotoneCollection) -> Result<Self> {
        let strategy = match (&offspring, collection.cardinality()) {
            (OffspringDistribution::Binomial { .. }, Some(_)) => Strategy::ClosedForm,
            _ if offspring.alphabet_size() <= EXACT_ALPHABET_LIMIT => Strategy::Exact,
            _ => Strategy::MonteCarlo { samples: MIN_MC_SAMPLES, seed: 0 },
        };
        Self::with_strategy(ChildLaw::Offspring(offspring), collection, strategy)
    }

    pub fn with_strategy(law: ChildLaw, collection: MonotoneCollection, strategy: Strategy) -> Result<Self> {
        let eval = match (&strategy, &law) {
            (Strategy::ClosedForm, ChildLaw::Offspring(OffspringDistribution::Binomial { n, p })) => {
                match collection.cardinality() {
                    Some(a) => Evaluator::ClosedForm { n: *n, p: *p, a },
                    None => {
                        return Err(Error::Capability(
                            "closed form needs a cardinality collection".into(),
                        ))
                    }
                }
            }
            (Strategy::ClosedForm, _) => {
                return Err(Error::Capability("closed form needs binomial offspring".into()))
            }
            (Strategy::Exact, ChildLaw::Offspring(off)) => {
                let n = off.alphabet_size();
                match (off.product_form(), collection.cardinality()) {
                    (Some(p), Some(a)) => Evaluator::ProductSizes { p, a },
                    _ if n > EXACT_ALPHABET_LIMIT => {
                        return Err(Error::Capability(format!(
                            "exact enumeration limited to alphabets of size {EXACT_ALPHABET_LIMIT}, got {n}"
                        )))
                    }
                    (Some(p), None) => {
                        let non_members = (0u32..(1u32 << n))
                            .filter(|&m| !collection.closure_member(&mask_letters(m)))
                            .collect();
                        Evaluator::ProductMasks { p, non_members }
                    }
                    (None, _) => {
                        let OffspringDistribution::Table { rows, .. } = off else { unreachable!() };
                        let rows = rows
                            .iter()
                            .map(|r| {
                                let k = r.subset.len();
                                let mut counts = vec![0u64; k + 1];
                                for m in 0u32..(1u32 << k) {
                                    let y: Vec<Letter> = (0..k)
                                        .filter(|&i| m >> i & 1 == 1)
                                        .map(|i| r.subset[i])
                                        .collect();
                                    if !collection.closure_member(&y) {
                                        counts[y.len()] += 1;
                                    }
                                }
                                (r.prob, counts)
                            })
                            .collect();
                        Evaluator::Table { rows }
                    }
                }
            }
            (Strategy::Exact, ChildLaw::Sampler { .. }) => {
                return Err(Error::Capability("exact enumeration needs an explicit offspring law".into()))
            }
            (Strategy::MonteCarlo { samples, seed }, _) => {
                let pool = (0..*samples as u64)
                    .into_par_iter()
                    .map(|t| {
                        let mut rng = trial_rng(*seed, t);
                        let w = match &law {
                            ChildLaw::Offspring(o) => o.sample(&mut rng),
                            ChildLaw::Sampler { sample, .. } => sample(&mut rng),
                        };
                        let u = w.iter().map(|_| rng.random::<f64>()).collect();
                        (w, u)
                    })
                    .collect();
                Evaluator::Mc { pool }
            }
        };
        Ok(GFunction { law, collection, strategy, eval: Arc::new(eval) })
    }

    pub fn eval(&self, s: f64) -> GValue {
        let s = s.clamp(0.0, 1.0);
        match &*self.eval {
            Evaluator::ClosedForm { n, p, a } => GValue {
                value: binom_cdf(u64::from(*n), p * (1.0 - s), *a as i64 - 1),
                std_err: None,
            },
            Evaluator::ProductSizes { p, a } => {
                let mut d = vec![1.0];
                for &q in p {
                    let q = q * (1.0 - s);
                    let mut e = vec![0.0; d.len() + 1];
                    for (j, &x) in d.iter().enumerate() {
                        e[j] += x * (1.0 - q);
                        e[j + 1] += x * q;
                    }
                    d = e;
                }
                GValue { value: d.iter().take(*a).sum::<f64>().min(1.0), std_err: None }
            }
            Evaluator::ProductMasks { p, non_members } => {
                let value = non_members
                    .iter()
                    .map(|&m| {
                        p.iter()
                            .enumerate()
                            .map(|(i, &q)| {
                                let q = q * (1.0 - s);
                                if m >> i & 1 == 1 { q } else { 1.0 - q }
                            })
                            .product::<f64>()
                    })
                    .sum::<f64>();
                GValue { value: value.min(1.0), std_err: None }
            }
            Evaluator::Table { rows } => {
                let value = rows
                    .iter()
                    .map(|(prob, counts)| {
                        let k = counts.len() - 1;
                        prob * counts
                            .iter()
                            .enumerate()
                            .map(|(j, &c)| c as f64 * (1.0 - s).powi(j as i32) * s.powi((k - j) as i32))
                            .sum::<f64>()
                    })
                    .sum::<f64>();
                GValue { value: value.min(1.0), std_err: None }
            }
            Evaluator::Mc { pool } => {
                let hits = pool
                    .par_iter()
                    .filter(|(w, u)| {
                        let kept: Vec<Letter> =
                            w.iter().zip(u).filter(|(_, &x)| x >= s).map(|(&l, _)| l).collect();
                        !self.collection.closure_member(&kept)
                    })
                    .count() as u64;
                let est = McEstimate::from_counts(hits, pool.len() as u64);
                GValue { value: est.estimate, std_err: Some(est.std_err) }
            }
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self.strategy, Strategy::MonteCarlo { .. })
    }
}

fn mask_letters(m: u32) -> Vec<Letter> {
    (0..32).filter(|&i| m >> i & 1 == 1).collect()
}

/// Smallest fixed point s0 of g and τ(𝒜) = 1 − s0.
#[derive(Clone, Debug, Serialize)]
pub struct FixedPoint {
    pub s0: f64,
    pub tau: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Independent bisection on g(s) − s (exact strategies only).
    pub bisection: Option<f64>,
    /// Interval known to contain s0 when noise or slow convergence stopped
    /// the iteration early.
    pub bracket: Option<(f64, f64)>,
    pub std_err: Option<f64>,
    pub method: String,
    pub trace: Vec<f64>,
}

const GRID_POINTS: usize = 21;

pub fn smallest_fixed_point(gf: &GFunction, tol: f64) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let method = format!("{:?}", gf.strategy);
    if gf.collection.is_trivial() {
        return Ok(FixedPoint {
            s0: 0.0,
            tau: 1.0,
            iterations: 0,
            converged: true,
            bisection: Some(0.0),
            bracket: None,
            std_err: None,
            method: "trivial collection".into(),
            trace: vec![],
        });
    }
    if gf.is_exact() {
        let grid: Vec<f64> = (0..GRID_POINTS)
            .map(|i| gf.eval(i as f64 / (GRID_POINTS - 1) as f64).value)
            .collect();
        if grid.windows(2).any(|w| w[1] < w[0] - 1e-12) {
            return Err(Error::invalid("g is not monotone on the validation grid"));
        }
        let g = |s: f64| gf.eval(s).value;
        let it = iterate_from_zero(g, tol, 10_000_000);
        let bisection = bisect_first_crossing(g, tol);
        let bracket = (!it.converged).then(|| (it.value, bisection.unwrap_or(1.0)));
        Ok(FixedPoint {
            s0: it.value,
            tau: 1.0 - it.value,
            iterations: it.iterations,
            converged: it.converged,
            bisection,
            bracket,
            std_err: None,
            method,
            trace: it.trace,
        })
    } else {
        let mut q = 0.0;
        let mut trace = Vec::new();
        let mut sigma = 0.0;
        let mut converged = false;
        let mut iterations = 0;
        for n in 1..=10_000 {
            let v = gf.eval(q);
            sigma = v.std_err.unwrap_or(0.0);
            trace.push(v.value);
            let step = (v.value - q).abs();
            q = v.value;
            iterations = n;
            if step < tol.max(3.0 * sigma) {
                converged = true;
                break;
            }
        }
        trace.truncate(64);
        Ok(FixedPoint {
            s0: q,
            tau: 1.0 - q,
            iterations,
            converged,
            bisection: None,
            bracket: Some(((q - 3.0 * sigma).max(0.0), (q + 3.0 * sigma).min(1.0))),
            std_err: Some(sigma),
            method,
            trace,
        })
    }
}

/// Locate the first sign change of g(s) − s on a grid and bisect it.
fn bisect_first_crossing(g: impl Fn(f64) -> f64, tol: f64) -> Option<f64> {
    if g(0.0) <= 0.0 {
        return Some(0.0);
    }
    let steps = 4096;
    let mut prev = 0.0;
    for i in 1..=steps {
        let s = i as f64 / steps as f64;
        if i == steps {
            return Some(1.0);
        }
        if g(s) < s {
            let (mut lo, mut hi) = (prev, s);
            while hi - lo > tol * 0.5 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > mid {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev = s;
    }
    None
}

/// P(Bin(n, q) ≤ k).
pub fn binom_cdf(n: u64, q: f64, k: i64) -> f64 {
    if k < 0 {
        return 0.0;
    }
    if k as u64 >= n || q <= 0.0 {
        return 1.0;
    }
    if q >= 1.0 {
        return 0.0;
    }
    beta_reg((n - k as u64) as f64, k as f64 + 1.0, 1.0 - q)
}

/// The nonnegligible part of the Bin(n, p) pmf: (first index, values).
pub fn binomial_pmf_window(n: u64, p: f64, cutoff: f64) -> (u64, Vec<f64>) {
    if p <= 0.0 || n == 0 {
        return (0, vec![1.0]);
    }
    if p >= 1.0 {
        return (n, vec![1.0]);
    }
    let mode = (((n + 1) as f64 * p).floor() as u64).min(n);
    let ln_pmf = |k: u64| -> f64 {
        ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
            + k as f64 * p.ln()
            + (n - k) as f64 * (1.0 - p).ln()
    };
    let at_mode = ln_pmf(mode).exp();
    let ratio = p / (1.0 - p);
    let mut right = vec![at_mode];
    let mut k = mode;
    let mut v = at_mode;
    while k < n {
        v *= (n - k) as f64 / (k + 1) as f64 * ratio;
        k += 1;
        if v < cutoff {
            break;
        }
        right.push(v);
    }
    let mut left = Vec::new();
    let mut k = mode;
    let mut v = at_mode;
    while k > 0 {
        v *= k as f64 / (n - k + 1) as f64 / ratio;
        k -= 1;
        if v < cutoff {
            break;
        }
        left.push(v);
    }
    let start = mode - left.len() as u64;
    left.reverse();
    left.extend(right);
    // ln Γ loses ~1e-11 relative accuracy for large n; renormalise.
    let total: f64 = left.iter().sum();
    left.iter_mut().for_each(|x| *x /= total);
    (start, left)
}

/// Truncation threshold for generation-size distributions.
pub const MASS_CUTOFF: f64 = 1e-15;
/// Largest k for which the exact generation-size recursion is attempted.
pub const EXACT_K_MAX: usize = 6;
/// Largest support kept by the exact recursion.
pub const EXACT_STATE_CAP: usize = 10_000_000;

/// Distributions of Z_0, ..., Z_k for binomial offspring, truncated at
/// MASS_CUTOFF per point.
pub fn generation_size_distributions(
    offspring: &OffspringDistribution,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let (n, p) = match offspring {
        OffspringDistribution::Binomial { n, p } => (u64::from(*n), *p),
        OffspringDistribution::Bernoulli { p } if p.windows(2).all(|w| w[0] == w[1]) => {
            (p.len() as u64, p[0])
        }
        _ => {
            return Err(Error::Capability(
                "exact generation sizes need binomial offspring".into(),
            ))
        }
    };
    if k > EXACT_K_MAX {
        return Err(Error::Capability(format!(
            "exact generation sizes limited to k ≤ {EXACT_K_MAX}"
        )));
    }
    let mut out = vec![vec![0.0, 1.0]];
    for _ in 0..k {
        let prev = out.last().expect("nonempty");
        let max_support = (prev.len() as u64 - 1) * n + 1;
        if max_support as usize > EXACT_STATE_CAP {
            return Err(Error::Capability("generation-size state cap exceeded".into()));
        }
        let mut next = vec![0.0; max_support as usize];
        for (z, &pz) in prev.iter().enumerate() {
            if pz < MASS_CUTOFF {
                continue;
            }
            let (start, pmf) = binomial_pmf_window(n * z as u64, p, MASS_CUTOFF * 1e-3);
            for (j, v) in pmf.iter().enumerate() {
                next[start as usize + j] += pz * v;
            }
        }
        while next.len() > 1 && *next.last().expect("nonempty") < MASS_CUTOFF {
            next.pop();
        }
        out.push(next);
    }
    Ok(out)
}

/// One point of a g_{k,a} curve.
#[derive(Clone, Debug, Serialize)]
pub struct GkPoint {
    pub k: usize,
    pub a: u64,
    pub s: f64,
    pub value: f64,
    pub std_err: f64,
    pub exact: bool,
    pub trials: u64,
}

/// g_{k,a}(s) = P(Z_k^(s) < a) for k = 1..=k_max with thresholds `a(k)`.
/// Uses the exact recursion when available and Monte Carlo otherwise.
pub fn g_k_a_curve(
    offspring: &OffspringDistribution,
    k_max: usize,
    a: impl Fn(usize) -> u64,
    s: f64,
    trials: u64,
    seed: u64,
) -> Result<Vec<GkPoint>> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::invalid(format!("thinning level {s} outside (0,1)")));
    }
    match generation_size_distributions(offspring, k_max) {
        Ok(dists) => Ok((1..=k_max)
            .map(|k| {
                let ak = a(k);
                let value: f64 = dists[k]
                    .iter()
                    .enumerate()
                    .map(|(z, &pz)| pz * binom_cdf(z as u64, 1.0 - s, ak as i64 - 1))
                    .sum();
                GkPoint { k, a: ak, s, value: value.min(1.0), std_err: 0.0, exact: true, trials: 0 }
            })
            .collect()),
        Err(Error::Capability(_)) => Ok((1..=k_max)
            .map(|k| {
                let est = g_k_a_monte_carlo(offspring, k, a(k), s, trials, derive_seed(seed, k as u64));
                GkPoint {
                    k,
                    a: a(k),
                    s,
                    value: est.estimate,
                    std_err: est.std_err,
                    exact: false,
                    trials,
                }
            })
            .collect()),
        Err(e) => Err(e),
    }
}

/// Monte Carlo estimate of P(Z_k^(s) < a) from the generation-size chain.
pub fn g_k_a_monte_carlo(
    offspring: &OffspringDistribution,
    k: usize,
    a: u64,
    s: f64,
    trials: u64,
    seed: u64,
) -> McEstimate {
    let hits = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let mut rng = trial_rng(seed, t);
            let mut z = 1u64;
            for _ in 0..k {
                z = offspring.next_generation(z, &mut rng);
            }
            let kept = if z == 0 {
                0
            } else {
                rand_distr::Distribution::sample(
                    &rand_distr::Binomial::new(z, 1.0 - s).expect("valid binomial"),
                    &mut rng,
                )
            };
            kept < a
        })
        .count() as u64;
    McEstimate::from_counts(hits, trials)
}

/// Per-a-value record of [`star_sup_g`].
#[derive(Clone, Debug, Serialize)]
pub struct StarSupEntry {
    pub a: f64,
    pub height: usize,
    pub witness: Word,
    pub value: f64,
    pub std_err: f64,
}

/// Truncated supremum of g over the nodes of the full *-tree.
#[derive(Clone, Debug, Serialize)]
pub struct StarSup {
    pub value: f64,
    pub witness: Word,
    pub entries: Vec<StarSupEntry>,
}

/// Default height truncation of the supremum.
pub const DEFAULT_HEIGHT_CAP: usize = 4;

/// The per-node collection 𝒜_x, given the node, a_ρ(x) and the section
/// Π_{ρ/a_ρ(x)} whose indices label the children.
pub type PredicateFamily<'a> = dyn Fn(&Word, f64, &Section) -> MonotoneCollection + Sync + 'a;

/// sup_x P(M_x^(s) ∉ 𝒜_x) over the distinct values a_ρ(x) realized at
/// heights ≤ height_cap. Since a_ρ(xj) = a_ρ(x)·r_j/ρ, nodes sharing a_ρ
/// share the law of M_x, so one representative per value is evaluated.
#[allow(clippy::too_many_arguments)]
pub fn star_sup_g(
    weights: &Weights,
    rho: f64,
    offspring: &OffspringDistribution,
    family: &PredicateFamily<'_>,
    s: f64,
    height_cap: usize,
    mc_samples: u64,
    seed: u64,
) -> Result<StarSup> {
    if !(rho > 0.0 && le_tol(rho, weights.r_min())) {
        return Err(Error::invalid(format!("rho = {rho} outside (0, r_min]")));
    }
    if weights.len() != offspring.alphabet_size() as usize {
        return Err(Error::invalid("weights and offspring alphabet differ in size"));
    }
    let key = |a: f64| (a.ln() * 1e9).round() as i64;
    let mut seen: BTreeMap<i64, (f64, usize, Word)> = BTreeMap::new();
    let mut frontier: Vec<(f64, Word)> = vec![(1.0, Word::root())];
    seen.insert(key(1.0), (1.0, 0, Word::root()));
    for h in 1..=height_cap {
        let mut next = Vec::new();
        for (a, x) in &frontier {
            let sec = pi_section(weights, rho / a, DEFAULT_NODE_BUDGET)?;
            for j in sec.words() {
                let a2 = a * weights.ratio(j) / rho;
                if let std::collections::btree_map::Entry::Vacant(e) = seen.entry(key(a2)) {
                    let w = x.concat(j);
                    e.insert((a2, h, w.clone()));
                    next.push((a2, w));
                }
            }
        }
        frontier = next;
    }
    let mut entries = Vec::new();
    for (_, (a, height, witness)) in seen {
        let sec = pi_section(weights, rho / a, DEFAULT_NODE_BUDGET)?;
        let coll = family(&witness, a, &sec);
        let (value, std_err) = match coll.cardinality() {
            Some(c) => {
                let dist = thinned_section_size_distribution(offspring, weights, rho / a, s)?;
                (dist.iter().take(c).sum::<f64>().min(1.0), 0.0)
            }
            None => {
                let est = section_g_monte_carlo(offspring, &sec, &coll, s, mc_samples, derive_seed(seed, height as u64));
                (est.estimate, est.std_err)
            }
        };
        entries.push(StarSupEntry { a, height, witness, value, std_err });
    }
    let best = entries
        .iter()
        .max_by(|x, y| x.value.total_cmp(&y.value))
        .expect("root entry present");
    Ok(StarSup { value: best.value, witness: best.witness.clone(), entries: entries.clone() })
}

/// Distribution of |(T ∩ Π_t)^(s)| for a GW tree T.
pub fn thinned_section_size_distribution(
    offspring: &OffspringDistribution,
    weights: &Weights,
    t: f64,
    s: f64,
) -> Result<Vec<f64>> {
    fn conv(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }
    fn rec(
        off: &OffspringDistribution,
        weights: &Weights,
        r: f64,
        t: f64,
        s: f64,
        memo: &mut HashMap<i64, Vec<f64>>,
    ) -> Vec<f64> {
        if le_tol(r, t) {
            return vec![s, 1.0 - s];
        }
        let key = (r.ln() * 1e9).round() as i64;
        if let Some(v) = memo.get(&key) {
            return v.clone();
        }
        let n = weights.len() as Letter;
        let child: Vec<Vec<f64>> = (0..n)
            .map(|i| rec(off, weights, r * weights.get(i), t, s, memo))
            .collect();
        let out = match off.product_form() {
            Some(p) => {
                let mut acc = vec![1.0];
                for (i, d) in child.iter().enumerate() {
                    let mut mix: Vec<f64> = d.iter().map(|x| x * p[i]).collect();
                    mix[0] += 1.0 - p[i];
                    acc = conv(&acc, &mix);
                }
                acc
            }
            None => {
                let OffspringDistribution::Table { rows, .. } = off else { unreachable!() };
                let mut acc = vec![0.0];
                for row in rows {
                    let mut d = vec![row.prob];
                    for &l in &row.subset {
                        d = conv(&d, &child[l as usize]);
                    }
                    if d.len() > acc.len() {
                        acc.resize(d.len(), 0.0);
                    }
                    for (i, x) in d.iter().enumerate() {
                        acc[i] += x;
                    }
                }
                acc
            }
        };
        memo.insert(key, out.clone());
        out
    }
    if t >= 1.0 {
        return Ok(vec![s, 1.0 - s]);
    }
    let size = pi_section(weights, t, DEFAULT_NODE_BUDGET)?.len();
    if size > 100_000 {
        return Err(Error::ResourceLimit { what: "section size".into(), limit: 100_000, depth: 0 });
    }
    Ok(rec(offspring, weights, 1.0, t, s, &mut HashMap::new()))
}

/// Monte Carlo estimate of P((T ∩ Π)^(s) ∉ 𝒜̄), labels being section indices.
pub fn section_g_monte_carlo(
    offspring: &OffspringDistribution,
    section: &Section,
    coll: &MonotoneCollection,
    s: f64,
    samples: u64,
    seed: u64,
) -> McEstimate {
    let hits = (0..samples)
        .into_par_iter()
        .filter(|&t| {
            let real = GwRealization::new(offspring.clone(), derive_seed(seed, t));
            let mut rng = trial_rng(seed, t);
            let members: Vec<Letter> = section_members(&real, section)
                .into_iter()
                .filter(|_| rng.random::<f64>() >= s)
                .collect();
            !coll.closure_member(&members)
        })
        .count() as u64;
    McEstimate::from_counts(hits, samples)
}

/// Indices of the section words present in a random tree.
pub fn section_members<T: RandomTree>(tree: &T, section: &Section) -> Vec<Letter> {
    let mut out = Vec::new();
    let mut stack = vec![Vec::<Letter>::new()];
    while let Some(w) = stack.pop() {
        if let Some(i) = section.index_of(&w) {
            out.push(i as Letter);
            continue;
        }
        for c in tree.children(&w) {
            let mut w2 = w.clone();
            w2.push(c);
            stack.push(w2);
        }
    }
    out.sort_unstable();
    out
}

/// A random *-tree: the root has children {0,1} with
/// probability α+ε and {0} otherwise; depth-1 nodes have every letter of an
/// `n`-letter alphabet; deeper nodes draw Bin({0,1,2}, p).
#[derive(Clone, Debug)]
pub struct StarGapTree {
    pub p: f64,
    pub root_pair_prob: f64,
    pub letters: u32,
    pub seed: u64,
}

impl RandomTree for StarGapTree {
    fn alphabet(&self) -> u32 {
        self.letters
    }

    fn children(&self, word: &[Letter]) -> Vec<Letter> {
        let mut rng = crate::rng::node_rng(self.seed, word);
        match word.len() {
            0 => {
                if rng.random::<f64>() < self.root_pair_prob {
                    vec![0, 1]
                } else {
                    vec![0]
                }
            }
            1 => (0..self.letters).collect(),
            _ => (0..3).filter(|_| rng.random::<f64>() < self.p).collect(),
        }
    }
}

/// Output of [`star_gap`].
#[derive(Clone, Debug, Serialize)]
pub struct StarGap {
    pub p: f64,
    pub eps: f64,
    pub alpha: f64,
    pub q: f64,
    pub g_of_q: f64,
    pub gap: f64,
    pub gap_limit: f64,
    /// g(q) recomputed as the supremum over node types of the *-tree.
    pub g_of_q_sup: f64,
    /// Monte Carlo estimate of P(M^(q) < 2) at the root: root children drawn
    /// from the tree, then thinned at q.
    pub mc_g: McEstimate,
    /// Monte Carlo estimate of P(no binary subtree of length `depth` below a
    /// depth-2 node).
    pub mc_q: McEstimate,
    pub depth: usize,
    /// |g^depth(0) − s0|: bias from finite depth.
    pub truncation_bias: f64,
}

/// Root versus supremum g at the extinction point, for Bin(3,p) perturbed by ε.
pub fn star_gap(p: f64, eps: f64, trials: u64, depth: usize, seed: u64) -> Result<StarGap> {
    let off = OffspringDistribution::binomial(3, p)?;
    let gf = GFunction::new(off, MonotoneCollection::Ary(2))?;
    let fp = smallest_fixed_point(&gf, 1e-14)?;
    let alpha = 1.0 - fp.s0;
    if alpha <= 1e-12 {
        return Err(Error::invalid(format!(
            "no binary subtree survives at p = {p} (α = 0); increase p"
        )));
    }
    if !(eps >= 0.0 && alpha + eps <= 1.0) {
        return Err(Error::invalid(format!("ε = {eps} must lie in [0, 1 − α]")));
    }
    let q = 1.0 - alpha;
    let g_of_q = 1.0 - (alpha + eps) * alpha * alpha;
    let letters = 10u32;
    // Node types: root, depth 1 (full alphabet, each child binary-capable
    // with probability α), depth ≥ 2 (a Bin(3,p) tree, value g_bin(q) = q).
    let depth1 = binom_cdf(u64::from(letters), alpha, 1);
    let deep = gf.eval(q).value;
    let g_of_q_sup = g_of_q.max(depth1).max(deep);
    let g = |s: f64| gf.eval(s).value;
    let mut qd = 0.0;
    for _ in 0..depth {
        qd = g(qd);
    }
    let hits = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let tree = StarGapTree {
                p,
                root_pair_prob: alpha + eps,
                letters,
                seed: derive_seed(seed, t),
            };
            !crate::extraction::lazy_has_ary_subtree(&tree, &[0, 0], 2, depth)
        })
        .count() as u64;
    let root_hits = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let tree = StarGapTree {
                p,
                root_pair_prob: alpha + eps,
                letters,
                seed: derive_seed(seed ^ 0x726f_6f74, t),
            };
            let mut rng = trial_rng(seed, t);
            crate::branching::thin(&tree.children(&[]), q, &mut rng).len() < 2
        })
        .count() as u64;
    Ok(StarGap {
        p,
        eps,
        alpha,
        q,
        g_of_q,
        gap: g_of_q - q,
        gap_limit: alpha - alpha.powi(3),
        g_of_q_sup,
        mc_g: McEstimate::from_counts(root_hits, trials),
        mc_q: McEstimate::from_counts(hits, trials),
        depth,
        truncation_bias: (qd - fp.s0).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_examples() {
        let g = MonotoneCollection::generators(vec![vec![0]]);
        assert!(g.closure_member(&[0, 1]));
        assert!(!g.closure_member(&[1]));
        assert!(!MonotoneCollection::Ary(3).closure_member(&[4, 5]));
        assert!(MonotoneCollection::Ary(3).closure_member(&[4, 5, 6]));
        assert!(MonotoneCollection::generators(vec![vec![], vec![1]]).is_trivial());
    }

    #[test]
    fn closed_form_value() {
        let off = OffspringDistribution::binomial(3, 0.9).unwrap();
        let gf = GFunction::new(off, MonotoneCollection::Ary(2)).unwrap();
        assert!((gf.eval(0.0).value - 0.028).abs() < 1e-12);
        assert!((gf.eval(1.0).value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn strategies_agree_on_generators() {
        let off = OffspringDistribution::binomial(6, 0.5).unwrap();
        let coll = MonotoneCollection::generators(vec![vec![0, 1], vec![2, 3, 4], vec![5]]);
        let exact = GFunction::with_strategy(
            ChildLaw::Offspring(off.clone()),
            coll.clone(),
            Strategy::Exact,
        )
        .unwrap();
        let table_rows = (0u32..64)
            .map(|m| crate::branching::TableRow { subset: mask_letters(m), prob: 1.0 / 64.0 })
            .collect();
        let table = GFunction::new(
            OffspringDistribution::table(table_rows, Some(6)).unwrap(),
            coll,
        )
        .unwrap();
        for s in [0.0, 0.2, 0.5, 0.9] {
            assert!((exact.eval(s).value - table.eval(s).value).abs() < 1e-12);
        }
    }

    #[test]
    fn capability_errors() {
        let off = OffspringDistribution::bernoulli(vec![0.5; 3]).unwrap();
        let e = GFunction::with_strategy(
            ChildLaw::Offspring(off),
            MonotoneCollection::Ary(1),
            Strategy::ClosedForm,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Capability(_)));
    }

    #[test]
    fn trivial_collection_fixed_point() {
        let off = OffspringDistribution::binomial(2, 0.5).unwrap();
        let gf = GFunction::new(off, MonotoneCollection::TrivialAll).unwrap();
        let fp = smallest_fixed_point(&gf, 1e-12).unwrap();
        assert_eq!((fp.s0, fp.tau), (0.0, 1.0));
    }

    #[test]
    fn pmf_window_sums_to_one() {
        for (n, p) in [(10u64, 0.3), (5000, 0.6), (1, 0.5)] {
            let (_, v) = binomial_pmf_window(n, p, 1e-18);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_sizes_have_the_right_mean() {
        let off = OffspringDistribution::binomial(9, 0.6).unwrap();
        let d = generation_size_distributions(&off, 3).unwrap();
        for (k, dist) in d.iter().enumerate() {
            let mass: f64 = dist.iter().sum();
            let mean: f64 = dist.iter().enumerate().map(|(z, p)| z as f64 * p).sum();
            assert!((mass - 1.0).abs() < 1e-9);
            assert!((mean - 5.4f64.powi(k as i32)).abs() < 1e-6 * 5.4f64.powi(k as i32));
        }
    }

    #[test]
    fn g_k_a_first_point_is_empty_probability() {
        let off = OffspringDistribution::binomial(4, 0.5).unwrap();
        let c = g_k_a_curve(&off, 1, |_| 1, 0.3, 0, 0).unwrap();
        let expect = (1.0 - 0.5 * 0.7f64).powi(4);
        assert!((c[0].value - expect).abs() < 1e-12);
    }

    #[test]
    fn star_sup_equal_weights_single_value() {
        let off = OffspringDistribution::binomial(2, 0.8).unwrap();
        let w = Weights::uniform(2, 0.5).unwrap();
        let fam = |_: &Word, _: f64, _: &Section| MonotoneCollection::Ary(2);
        let sup = star_sup_g(&w, 0.25, &off, &fam, 0.3, 4, 0, 0).unwrap();
        assert_eq!(sup.entries.len(), 1);
        let one = star_sup_g(&w, 0.25, &off, &fam, 1.0, 4, 0, 0).unwrap();
        assert!((one.value - 1.0).abs() < 1e-12);
    }
}
