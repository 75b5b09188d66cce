//! Offspring laws, Galton–Watson sampling, thinning and extinction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixpoint::iterate_from_zero;
use crate::rng::{derive_seed, node_rng, trial_rng};
use crate::symbolic::{FiniteTree, Letter, DEFAULT_NODE_BUDGET};

/// Largest alphabet accepted by explicit tables.
pub const MAX_TABLE_ALPHABET: u32 = 20;

/// One row of an explicit offspring table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub subset: Vec<Letter>,
    pub prob: f64,
}

/// Law of the random child set W ⊆ Λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffspringDistribution {
    /// Each of `n` letters kept independently with probability `p`.
    Binomial { n: u32, p: f64 },
    /// Letter `i` kept independently with probability `p[i]`.
    Bernoulli { p: Vec<f64> },
    /// Explicit (subset, probability) rows.
    Table {
        rows: Vec<TableRow>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alphabet: Option<u32>,
    },
}

impl OffspringDistribution {
    pub fn binomial(n: u32, p: f64) -> Result<Self> {
        let d = OffspringDistribution::Binomial { n, p };
        d.validate()?;
        Ok(d)
    }

    pub fn bernoulli(p: Vec<f64>) -> Result<Self> {
        let d = OffspringDistribution::Bernoulli { p };
        d.validate()?;
        Ok(d)
    }

    pub fn table(rows: Vec<TableRow>, alphabet: Option<u32>) -> Result<Self> {
        let mut rows = rows;
        for r in &mut rows {
            r.subset.sort_unstable();
        }
        let d = OffspringDistribution::Table { rows, alphabet };
        d.validate()?;
        Ok(d)
    }

    /// Parse a JSON document and validate it.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut d: OffspringDistribution = serde_json::from_str(s)?;
        if let OffspringDistribution::Table { rows, .. } = &mut d {
            for r in rows.iter_mut() {
                r.subset.sort_unstable();
            }
        }
        d.validate()?;
        Ok(d)
    }

    /// Parse the shorthand `bin:N:p`, `bern:p0,p1,...`, or a JSON document.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return Self::from_json(s);
        }
        let bad = || Error::invalid(format!("cannot parse offspring {s:?}"));
        let mut parts = s.split(':');
        match parts.next() {
            Some("bin") => {
                let n = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
                let p = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
                Self::binomial(n, p)
            }
            Some("bern") => {
                let p = parts
                    .next()
                    .ok_or_else(bad)?
                    .split(',')
                    .map(|x| x.parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                Self::bernoulli(p)
            }
            _ => Err(bad()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| p > 0.0 && p <= 1.0;
        match self {
            OffspringDistribution::Binomial { n, p } => {
                if *n == 0 {
                    return Err(Error::invalid("binomial alphabet must be nonempty"));
                }
                if !prob_ok(*p) {
                    return Err(Error::invalid(format!("binomial p = {p} outside (0,1]")));
                }
            }
            OffspringDistribution::Bernoulli { p } => {
                if p.is_empty() {
                    return Err(Error::invalid("bernoulli alphabet must be nonempty"));
                }
                if let Some(x) = p.iter().find(|x| !prob_ok(**x)) {
                    return Err(Error::invalid(format!("bernoulli p = {x} outside (0,1]")));
                }
            }
            OffspringDistribution::Table { rows, alphabet } => {
                let n = self.alphabet_size();
                if n == 0 || n > MAX_TABLE_ALPHABET {
                    return Err(Error::invalid(format!(
                        "table alphabet size {n} outside 1..={MAX_TABLE_ALPHABET}"
                    )));
                }
                let total: f64 = rows.iter().map(|r| r.prob).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid(format!("table probabilities sum to {total}")));
                }
                for r in rows {
                    if !(r.prob >= 0.0) {
                        return Err(Error::invalid("negative table probability"));
                    }
                    if r.subset.windows(2).any(|w| w[0] == w[1]) {
                        return Err(Error::invalid("table subset has repeated letters"));
                    }
                    if let (Some(a), Some(&mx)) = (alphabet, r.subset.last()) {
                        if mx >= *a {
                            return Err(Error::invalid(format!("letter {mx} outside alphabet")));
                        }
                    }
                }
                if let Some(i) = self.inclusion_probs().iter().position(|&q| q <= 0.0) {
                    return Err(Error::invalid(format!("letter {i} is never a child")));
                }
            }
        }
        Ok(())
    }

    pub fn alphabet_size(&self) -> u32 {
        match self {
            OffspringDistribution::Binomial { n, .. } => *n,
            OffspringDistribution::Bernoulli { p } => p.len() as u32,
            OffspringDistribution::Table { rows, alphabet } => alphabet.unwrap_or_else(|| {
                rows.iter()
                    .filter_map(|r| r.subset.last())
                    .max()
                    .map_or(0, |m| m + 1)
            }),
        }
    }

    /// P(i ∈ W) for every letter.
    pub fn inclusion_probs(&self) -> Vec<f64> {
        match self {
            OffspringDistribution::Binomial { n, p } => vec![*p; *n as usize],
            OffspringDistribution::Bernoulli { p } => p.clone(),
            OffspringDistribution::Table { rows, .. } => {
                let mut q = vec![0.0; self.alphabet_size() as usize];
                for r in rows {
                    for &l in &r.subset {
                        q[l as usize] += r.prob;
                    }
                }
                q
            }
        }
    }

    /// Per-letter probabilities when letters are included independently.
    pub fn product_form(&self) -> Option<Vec<f64>> {
        match self {
            OffspringDistribution::Table { .. } => None,
            _ => Some(self.inclusion_probs()),
        }
    }

    /// m = E|W|.
    pub fn mean(&self) -> f64 {
        self.inclusion_probs().iter().sum()
    }

    /// P(|W| = j) for j = 0..=N.
    pub fn size_distribution(&self) -> Vec<f64> {
        let n = self.alphabet_size() as usize;
        match self {
            OffspringDistribution::Table { rows, .. } => {
                let mut d = vec![0.0; n + 1];
                for r in rows {
                    d[r.subset.len()] += r.prob;
                }
                d
            }
            _ => {
                let mut d = vec![1.0];
                for q in self.inclusion_probs() {
                    let mut e = vec![0.0; d.len() + 1];
                    for (j, &x) in d.iter().enumerate() {
                        e[j] += x * (1.0 - q);
                        e[j + 1] += x * q;
                    }
                    d = e;
                }
                d
            }
        }
    }

    /// f(s) = E s^{|W|}.
    pub fn pgf(&self, s: f64) -> f64 {
        match self {
            OffspringDistribution::Binomial { n, p } => (1.0 - p + p * s).powi(*n as i32),
            OffspringDistribution::Bernoulli { p } => p.iter().map(|q| 1.0 - q + q * s).product(),
            OffspringDistribution::Table { rows, .. } => rows
                .iter()
                .map(|r| r.prob * s.powi(r.subset.len() as i32))
                .sum(),
        }
    }

    /// Draw one child set, sorted.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Letter> {
        match self {
            OffspringDistribution::Binomial { n, p } => {
                (0..*n).filter(|_| rng.random::<f64>() < *p).collect()
            }
            OffspringDistribution::Bernoulli { p } => (0..p.len() as Letter)
                .filter(|&i| rng.random::<f64>() < p[i as usize])
                .collect(),
            OffspringDistribution::Table { rows, .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for r in rows {
                    acc += r.prob;
                    if u < acc {
                        return r.subset.clone();
                    }
                }
                rows.iter()
                    .rev()
                    .find(|r| r.prob > 0.0)
                    .map(|r| r.subset.clone())
                    .unwrap_or_default()
            }
        }
    }

    /// Draw Z_{n+1} given Z_n = z without labelling the nodes.
    pub fn next_generation<R: Rng + ?Sized>(&self, z: u64, rng: &mut R) -> u64 {
        if z == 0 {
            return 0;
        }
        let bin = |n: u64, p: f64, rng: &mut R| -> u64 {
            if p >= 1.0 {
                n
            } else {
                Binomial::new(n, p).expect("valid binomial").sample(rng)
            }
        };
        match self {
            OffspringDistribution::Binomial { n, p } => bin(z * u64::from(*n), *p, rng),
            OffspringDistribution::Bernoulli { p } => p.iter().map(|&q| bin(z, q, rng)).sum(),
            OffspringDistribution::Table { rows, .. } => {
                let mut left = z;
                let mut mass = 1.0;
                let mut total = 0;
                for r in rows {
                    if left == 0 {
                        break;
                    }
                    let q = if mass > 0.0 { (r.prob / mass).min(1.0) } else { 1.0 };
                    let c = bin(left, q, rng);
                    total += c * r.subset.len() as u64;
                    left -= c;
                    mass -= r.prob;
                }
                total
            }
        }
    }

    /// True when |W| = 1 almost surely.
    pub fn size_is_one_as(&self) -> bool {
        let d = self.size_distribution();
        (d.get(1).copied().unwrap_or(0.0) - 1.0).abs() < 1e-15
    }
}

/// A random tree given implicitly by its child-set oracle.
pub trait RandomTree: Sync {
    fn alphabet(&self) -> u32;
    /// Sorted child letters of `word` (which must itself be a node).
    fn children(&self, word: &[Letter]) -> Vec<Letter>;
}

/// The Galton–Watson realization with a given seed, evaluated lazily. Node
/// `w` always receives the same child set, whichever order nodes are visited.
#[derive(Clone, Debug)]
pub struct GwRealization {
    pub offspring: OffspringDistribution,
    pub seed: u64,
}

impl GwRealization {
    pub fn new(offspring: OffspringDistribution, seed: u64) -> Self {
        GwRealization { offspring, seed }
    }
}

impl RandomTree for GwRealization {
    fn alphabet(&self) -> u32 {
        self.offspring.alphabet_size()
    }

    fn children(&self, word: &[Letter]) -> Vec<Letter> {
        self.offspring.sample(&mut node_rng(self.seed, word))
    }
}

/// A sampled Galton–Watson tree together with how it was produced.
#[derive(Clone, Debug)]
pub struct GwSample {
    pub tree: FiniteTree,
    pub seed: u64,
    pub offspring: OffspringDistribution,
    pub extinct_at: Option<usize>,
}

pub fn sample_gw(offspring: &OffspringDistribution, depth: usize, seed: u64) -> Result<GwSample> {
    sample_gw_with_budget(offspring, depth, seed, DEFAULT_NODE_BUDGET)
}

pub fn sample_gw_with_budget(
    offspring: &OffspringDistribution,
    depth: usize,
    seed: u64,
    budget: usize,
) -> Result<GwSample> {
    if depth == 0 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    offspring.validate()?;
    let real = GwRealization::new(offspring.clone(), seed);
    let tree = sample_tree(&real, depth, budget)?;
    let extinct_at = tree.extinct_at();
    Ok(GwSample {
        tree,
        seed,
        offspring: offspring.clone(),
        extinct_at,
    })
}

/// Materialize any random tree to the given depth.
pub fn sample_tree<T: RandomTree>(tree: &T, depth: usize, budget: usize) -> Result<FiniteTree> {
    FiniteTree::grow(tree.alphabet(), depth, budget, |w| tree.children(w))
}

/// X^(s): keep each element independently with probability 1 − s.
pub fn thin<R: Rng + ?Sized>(subset: &[Letter], s: f64, rng: &mut R) -> Vec<Letter> {
    subset
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= s)
        .collect()
}

/// Thin a set with a seed instead of a caller-held generator.
pub fn thin_seeded(subset: &[Letter], s: f64, seed: u64) -> Vec<Letter> {
    thin(subset, s, &mut trial_rng(seed, 0))
}

/// T^(s): every edge kept independently with probability 1 − s (a removed
/// child takes its subtree with it). The uniforms are tied to the nodes, so
/// larger s always gives a subtree of the smaller-s result.
pub fn thin_tree(tree: &FiniteTree, s: f64, seed: u64) -> Result<FiniteTree> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("thinning level {s} outside [0,1]")));
    }
    let seed = derive_seed(seed, 0x7468_696e);
    FiniteTree::grow(tree.alphabet(), tree.depth(), usize::MAX, |w| {
        let id = tree.find(w).expect("thinned node is in the source tree");
        tree.child_letters(id)
            .into_iter()
            .filter(|&c| {
                let mut cw = w.to_vec();
                cw.push(c);
                node_rng(seed, &cw).random::<f64>() >= s
            })
            .collect()
    })
}

pub fn pgf(offspring: &OffspringDistribution, s: f64) -> f64 {
    offspring.pgf(s)
}

/// Extinction probability with its bisection cross-check.
#[derive(Clone, Debug, Serialize)]
pub struct Extinction {
    pub q: f64,
    pub q_bisection: f64,
    pub iterations: usize,
    pub mean: f64,
}

/// Smallest fixed point of the offspring pgf, found by iteration from 0.
pub fn extinction_prob(offspring: &OffspringDistribution, tol: f64) -> Result<Extinction> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mean = offspring.mean();
    if offspring.size_is_one_as() {
        return Ok(Extinction { q: 0.0, q_bisection: 0.0, iterations: 0, mean });
    }
    if mean <= 1.0 {
        return Ok(Extinction { q: 1.0, q_bisection: 1.0, iterations: 0, mean });
    }
    let f = |s: f64| offspring.pgf(s);
    let it = iterate_from_zero(f, tol * 1e-3, 10_000_000);
    let q_bisection = bisect_smallest_root(f, tol * 1e-3);
    Ok(Extinction { q: it.value, q_bisection, iterations: it.iterations, mean })
}

/// Smallest root of f(s) = s on [0,1] for convex increasing f with f(1) = 1.
pub(crate) fn bisect_smallest_root(f: impl Fn(f64) -> f64, tol: f64) -> f64 {
    if f(0.0) <= 0.0 {
        return 0.0;
    }
    let mut hi = None;
    for k in 1..=60 {
        let s = 1.0 - 0.5f64.powi(k);
        if f(s) < s {
            hi = Some(s);
            break;
        }
    }
    let Some(mut hi) = hi else { return 1.0 };
    let mut lo = 0.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) > mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A Monte Carlo frequency with its standard error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_err: f64,
    pub hits: u64,
    pub trials: u64,
}

impl McEstimate {
    pub fn from_counts(hits: u64, trials: u64) -> Self {
        let p = if trials == 0 { 0.0 } else { hits as f64 / trials as f64 };
        let std_err = if trials == 0 { 0.0 } else { (p * (1.0 - p) / trials as f64).sqrt() };
        McEstimate { estimate: p, std_err, hits, trials }
    }

    /// |estimate − target| ≤ k·σ, where σ is the binomial standard error at
    /// the target value (so a zero count is judged against the target).
    pub fn within_sigma(&self, target: f64, k: f64) -> bool {
        let sigma = (target * (1.0 - target) / self.trials.max(1) as f64).sqrt();
        (self.estimate - target).abs() <= k * sigma.max(self.std_err)
    }

    pub fn ci(&self, k: f64) -> (f64, f64) {
        (self.estimate - k * self.std_err, self.estimate + k * self.std_err)
    }
}

/// Above this generation size extinction is treated as impossible; the
/// neglected probability is at most q^cap.
pub const SURVIVAL_CAP: u64 = 10_000;

/// Frequency of extinction by generation `depth` over independent trials.
pub fn extinction_frequency(
    offspring: &OffspringDistribution,
    depth: usize,
    trials: u64,
    seed: u64,
) -> McEstimate {
    let hits: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng: ChaCha8Rng = trial_rng(seed, t);
            let mut z = 1u64;
            for _ in 0..depth {
                z = offspring.next_generation(z, &mut rng);
                if z == 0 || z >= SURVIVAL_CAP {
                    break;
                }
            }
            u64::from(z == 0)
        })
        .sum();
    McEstimate::from_counts(hits, trials)
}

/// Z_k / m^k for k = 0..=depth.
pub fn kesten_stigum_series(sample: &GwSample, m: f64) -> Result<Vec<f64>> {
    if !(m > 1.0) {
        return Err(Error::invalid(format!("kesten-stigum series needs m > 1, got {m}")));
    }
    Ok(sample
        .tree
        .level_sizes()
        .iter()
        .enumerate()
        .map(|(k, &z)| z as f64 / m.powi(k as i32))
        .collect())
}

/// Result of [`descendant_property_frequency`].
#[derive(Clone, Debug, Serialize)]
pub struct DescendantFrequency {
    /// Fraction of level-`level` nodes v whose subtree T^v has the property.
    pub node_fraction: f64,
    /// Fraction of surviving trees with at least one such node.
    pub witness_fraction: McEstimate,
    pub accepted: u64,
    pub rejected: u64,
    pub nodes: u64,
}

/// Default retry cap for conditioning on survival by rejection.
pub const DEFAULT_RETRY_CAP: u64 = 100_000;

/// Estimate how often level-`level` subtrees satisfy `property`, conditioned
/// on survival to `depth`.
#[allow(clippy::too_many_arguments)]
pub fn descendant_property_frequency<P>(
    offspring: &OffspringDistribution,
    property: P,
    level: usize,
    depth: usize,
    trials: u64,
    seed: u64,
    retry_cap: u64,
) -> Result<DescendantFrequency>
where
    P: Fn(&FiniteTree) -> bool + Sync,
{
    if depth < level {
        return Err(Error::invalid("depth must be at least the inspected level"));
    }
    let mut accepted = 0u64;
    let mut rejected = 0u64;
    let mut nodes = 0u64;
    let mut good = 0u64;
    let mut witnessed = 0u64;
    let mut attempt = 0u64;
    while accepted < trials && attempt < retry_cap {
        let sample = sample_gw(offspring, depth.max(1), derive_seed(seed, attempt))?;
        attempt += 1;
        if sample.extinct_at.is_some() {
            rejected += 1;
            continue;
        }
        accepted += 1;
        let tree = &sample.tree;
        let ids: Vec<_> = tree.level(level).collect();
        let hits = ids
            .par_iter()
            .filter(|&&id| property(&tree.subtree(id)))
            .count() as u64;
        nodes += ids.len() as u64;
        good += hits;
        witnessed += u64::from(hits > 0);
    }
    if accepted == 0 {
        return Err(Error::DegenerateSample(format!(
            "no surviving tree among {rejected} attempts"
        )));
    }
    Ok(DescendantFrequency {
        node_fraction: if nodes == 0 { 0.0 } else { good as f64 / nodes as f64 },
        witness_fraction: McEstimate::from_counts(witnessed, accepted),
        accepted,
        rejected,
        nodes,
    })
}
