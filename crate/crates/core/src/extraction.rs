//! Detection and extraction of 𝒜-subtrees, the percolation and general
//! pipelines producing diffuse Ahlfors-regular subsets, and natural measures.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::branching::{GwRealization, OffspringDistribution, RandomTree};
use crate::error::{Error, Result};
use crate::fixpoint::{self, MonotoneCollection};
use crate::geometry::{
    geometric_ladder, pieces_constant, render_star, star_node_maps, width, MeasuredTree, Piece,
    Point, PointCloud, SimilarityIfs, SimilarityMap, COARSE_DIRECTIONS,
};
use crate::rng::{derive_seed, node_rng};
use crate::symbolic::{decode_block, le_tol, FiniteTree, Letter, StarTree, Weights, Word};

/// Which child sets count as good.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum SubtreePredicate {
    /// At least `a` children.
    Ary(usize),
    CardinalityAtLeast(usize),
    /// Labels are k-blocks over Λ_b^d; some prefix a of length k−2 has all
    /// of a(Λ_b^d)² present.
    DiffuseBlock { b: u32, d: u32, k: usize },
    /// Some group of children sharing all but their last `j` letters has
    /// images of F whose certified diffuseness constant, in the frame of the
    /// common prefix, is at least `c`.
    SectionDiffuse { c: f64, j: usize },
    Intersection(Vec<SubtreePredicate>),
}

impl SubtreePredicate {
    fn cardinality(&self) -> usize {
        match self {
            SubtreePredicate::Ary(a) | SubtreePredicate::CardinalityAtLeast(a) => *a,
            SubtreePredicate::Intersection(v) => v.iter().map(|p| p.cardinality()).max().unwrap_or(0),
            _ => 0,
        }
    }

    fn structural(&self) -> Vec<&SubtreePredicate> {
        match self {
            SubtreePredicate::DiffuseBlock { .. } | SubtreePredicate::SectionDiffuse { .. } => vec![self],
            SubtreePredicate::Intersection(v) => v.iter().flat_map(|p| p.structural()).collect(),
            _ => vec![],
        }
    }
}

/// Geometry needed by [`SubtreePredicate::SectionDiffuse`].
pub struct GeometryContext {
    pub ifs: SimilarityIfs,
    /// Vertices of a polytope containing the attractor.
    pub hull: Vec<Point>,
    pub directions: usize,
    cache: Mutex<HashMap<Vec<Word>, f64>>,
}

impl GeometryContext {
    pub fn new(ifs: SimilarityIfs, directions: usize) -> Self {
        let hull = ifs.hull_polytope();
        GeometryContext { ifs, hull, directions, cache: Mutex::new(HashMap::new()) }
    }

    /// Certified diffuseness constant of {φ_s : s ∈ suffixes} relative to F.
    pub fn group_constant(&self, suffixes: &[Word]) -> f64 {
        if let Some(&c) = self.cache.lock().expect("cache lock").get(suffixes) {
            return c;
        }
        let c = if suffixes.len() < 2 {
            0.0
        } else {
            let pieces: Vec<Piece> = suffixes
                .iter()
                .map(|s| {
                    let m = self.ifs.word_map(s).expect("letters in range");
                    Piece { points: self.hull.iter().map(|p| m.apply(p)).collect(), slack: 0.0 }
                })
                .collect();
            pieces_constant(self.ifs.d, &pieces, self.directions).c_low
        };
        self.cache.lock().expect("cache lock").insert(suffixes.to_vec(), c);
        c
    }

    /// Greedily drop suffixes while the constant stays ≥ c.
    fn trim(&self, suffixes: &[Word], c: f64) -> Option<(Vec<usize>, f64)> {
        let mut keep: Vec<usize> = (0..suffixes.len()).collect();
        let mut value = self.group_constant(suffixes);
        if value < c {
            return None;
        }
        let mut i = 0;
        while i < keep.len() {
            let trial: Vec<usize> = keep.iter().copied().filter(|&x| x != keep[i]).collect();
            let words: Vec<Word> = trial.iter().map(|&x| suffixes[x].clone()).collect();
            let v = self.group_constant(&words);
            if v >= c {
                keep = trial;
                value = v;
            } else {
                i += 1;
            }
        }
        Some((keep, value))
    }
}

/// How labels of a tree relate to base words, plus optional geometry.
#[derive(Default)]
pub struct PredContext {
    /// Letters are codes of `k`-blocks over a base alphabet of this size.
    pub block: Option<(u32, usize)>,
    pub geometry: Option<GeometryContext>,
}

/// A witness child set with the frame-scaled constant it certifies.
#[derive(Clone, Debug)]
pub struct Witness {
    pub indices: Vec<usize>,
    /// Certified constant relative to the parent node (0 if not geometric).
    pub constant: f64,
}

impl SubtreePredicate {
    /// A minimal witness among `children` (relative base words, sorted),
    /// or None when the set is not in the closure.
    pub fn witness(&self, ctx: &PredContext, children: &[Word]) -> Result<Option<Witness>> {
        let mut required: BTreeSet<usize> = BTreeSet::new();
        let mut constant = f64::INFINITY;
        for s in self.structural() {
            match s.structural_witness(ctx, children)? {
                Some(w) => {
                    required.extend(w.indices);
                    constant = constant.min(w.constant);
                }
                None => return Ok(None),
            }
        }
        let need = self.cardinality();
        if children.len() < need {
            return Ok(None);
        }
        let mut i = 0;
        while required.len() < need {
            required.insert(i);
            i += 1;
        }
        Ok(Some(Witness {
            indices: required.into_iter().collect(),
            constant: if constant.is_finite() { constant } else { 0.0 },
        }))
    }

    fn structural_witness(&self, ctx: &PredContext, children: &[Word]) -> Result<Option<Witness>> {
        match self {
            SubtreePredicate::DiffuseBlock { b, d, k } => {
                if *k < 2 {
                    return Err(Error::invalid("diffuse block needs k ≥ 2"));
                }
                let n = b.pow(*d) as usize;
                let mut groups: HashMap<&[Letter], Vec<usize>> = HashMap::new();
                for (i, w) in children.iter().enumerate() {
                    if w.len() == *k && w[k - 2..].iter().all(|&l| (l as usize) < n) {
                        groups.entry(&w[..k - 2]).or_default().push(i);
                    }
                }
                let mut keys: Vec<&&[Letter]> = groups.keys().collect();
                keys.sort();
                for key in keys {
                    let mut idx = groups[*key].clone();
                    idx.sort_by(|&a, &b| children[a].cmp(&children[b]));
                    idx.dedup_by(|a, b| children[*a] == children[*b]);
                    if idx.len() == n * n {
                        return Ok(Some(Witness { indices: idx, constant: 0.0 }));
                    }
                }
                Ok(None)
            }
            SubtreePredicate::SectionDiffuse { c, j } => {
                let geo = ctx.geometry.as_ref().ok_or_else(|| {
                    Error::Capability("section-diffuse predicate needs IFS geometry".into())
                })?;
                let mut start = 0;
                while start < children.len() {
                    let w = &children[start];
                    if w.len() < *j {
                        start += 1;
                        continue;
                    }
                    let prefix = &w[..w.len() - j];
                    let mut end = start;
                    while end < children.len()
                        && children[end].len() == w.len()
                        && &children[end][..w.len() - j] == prefix
                    {
                        end += 1;
                    }
                    let suffixes: Vec<Word> =
                        children[start..end].iter().map(|x| Word(x[x.len() - j..].to_vec())).collect();
                    if let Some((keep, value)) = geo.trim(&suffixes, *c) {
                        let r_u = geo.ifs.weights().ratio(prefix);
                        return Ok(Some(Witness {
                            indices: keep.into_iter().map(|x| start + x).collect(),
                            constant: r_u * value,
                        }));
                    }
                    start = end;
                }
                Ok(None)
            }
            _ => Ok(Some(Witness { indices: vec![], constant: f64::INFINITY })),
        }
    }

    /// Closure membership of a child set.
    pub fn accepts(&self, ctx: &PredContext, children: &[Word]) -> Result<bool> {
        Ok(self.witness(ctx, children)?.is_some())
    }
}

/// The collection 𝒟_{b,k} over labels coding k-blocks of Λ_b^d.
pub fn diffuse_block_collection(b: u32, d: u32, k: usize) -> Result<MonotoneCollection> {
    if k < 2 || b < 2 {
        return Err(Error::invalid("diffuse block needs b ≥ 2 and k ≥ 2"));
    }
    let n = b.pow(d);
    let block = n.checked_pow(k as u32).ok_or_else(|| Error::invalid("block alphabet too large"))?;
    let _ = block;
    let pred = SubtreePredicate::DiffuseBlock { b, d, k };
    Ok(MonotoneCollection::oracle(format!("diffuse_block(b={b},d={d},k={k})"), move |labels| {
        let words: Vec<Word> = labels.iter().map(|&l| Word(decode_block(l, n, k))).collect();
        pred.accepts(&PredContext::default(), &words).unwrap_or(false)
    }))
}

fn label_words(ctx: &PredContext, letters: &[Letter]) -> Vec<Word> {
    letters
        .iter()
        .map(|&l| match ctx.block {
            Some((base, k)) => Word(decode_block(l, base, k)),
            None => Word(vec![l]),
        })
        .collect()
}

/// Bottom-up DP: good_0 ≡ true, good_m(v) iff the good children of v form a
/// member of the predicate's closure. Returns the extracted subtree of
/// length n when good_n(root).
pub fn find_subtree(
    tree: &FiniteTree,
    pred: &SubtreePredicate,
    ctx: &PredContext,
    n: usize,
) -> Result<Option<FiniteTree>> {
    if n > tree.depth() {
        return Err(Error::invalid(format!("tree depth {} < requested length {n}", tree.depth())));
    }
    // good[l] flags nodes of level l for good_{n−l}.
    let mut good: Vec<Vec<bool>> = vec![Vec::new(); n + 1];
    good[n] = vec![true; tree.level_size(n)];
    for l in (0..n).rev() {
        let next = &good[l + 1];
        let flags = tree
            .level(l)
            .map(|id| {
                let kids: Vec<_> = tree.children(id).filter(|c| next[c.index]).collect();
                let letters: Vec<Letter> = kids.iter().map(|&c| tree.letter(c)).collect();
                pred.accepts(ctx, &label_words(ctx, &letters))
            })
            .collect::<Result<Vec<bool>>>()?;
        good[l] = flags;
    }
    if !good[0].first().copied().unwrap_or(false) {
        return Ok(None);
    }
    let mut words = vec![Word::root()];
    let mut frontier = vec![tree.root()];
    for l in 0..n {
        let mut next = Vec::new();
        for id in frontier {
            let kids: Vec<_> = tree.children(id).filter(|c| good[l + 1][c.index]).collect();
            let letters: Vec<Letter> = kids.iter().map(|&c| tree.letter(c)).collect();
            let w = pred
                .witness(ctx, &label_words(ctx, &letters))?
                .expect("good node has a witness");
            for i in w.indices {
                words.push(tree.word(kids[i]));
                next.push(kids[i]);
            }
        }
        frontier = next;
    }
    Ok(Some(FiniteTree::from_words(tree.alphabet(), n, words)?))
}

/// The same DP on a *-tree, by height.
pub fn find_star_subtree(
    tree: &StarTree,
    pred: &SubtreePredicate,
    ctx: &PredContext,
    n: usize,
) -> Result<Option<StarTree>> {
    if n > tree.height() {
        return Err(Error::invalid(format!("tree height {} < requested length {n}", tree.height())));
    }
    let mut good = vec![false; tree.len()];
    let mut by_height: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (i, node) in tree.nodes().iter().enumerate() {
        if node.height <= n {
            by_height[node.height].push(i);
        }
    }
    for &i in &by_height[n] {
        good[i] = true;
    }
    for h in (0..n).rev() {
        for &i in &by_height[h] {
            let kids: Vec<usize> = tree.children(i).iter().copied().filter(|&c| good[c]).collect();
            let words: Vec<Word> = kids.iter().map(|&c| tree.node(c).suffix.clone()).collect();
            good[i] = pred.accepts(ctx, &words)?;
        }
    }
    if !good[tree.root()] {
        return Ok(None);
    }
    let mut out = StarTree::new(tree.alphabet());
    let mut stack = vec![(tree.root(), out.root())];
    while let Some((i, oi)) = stack.pop() {
        if tree.node(i).height == n {
            continue;
        }
        let kids: Vec<usize> = tree.children(i).iter().copied().filter(|&c| good[c]).collect();
        let words: Vec<Word> = kids.iter().map(|&c| tree.node(c).suffix.clone()).collect();
        let w = pred.witness(ctx, &words)?.expect("good node has a witness");
        for k in w.indices {
            let id = out.add_child(oi, words[k].clone());
            stack.push((kids[k], id));
        }
    }
    Ok(Some(out))
}

/// Whether the random tree has an a-ary subtree of length m below `word`,
/// evaluated lazily with early termination.
pub fn lazy_has_ary_subtree<T: RandomTree>(tree: &T, word: &[Letter], a: usize, m: usize) -> bool {
    if m == 0 {
        return true;
    }
    let mut count = 0;
    let mut w = word.to_vec();
    for c in tree.children(word) {
        w.push(c);
        if lazy_has_ary_subtree(tree, &w, a, m - 1) {
            count += 1;
            if count >= a {
                return true;
            }
        }
        w.pop();
    }
    false
}

/// n-th level natural measure of an exactly ρ^{−α}-ary *-tree: ρ^{hα} per
/// height-h node.
pub fn natural_measure(tree: &StarTree, rho: f64, alpha: f64) -> Result<Vec<f64>> {
    let arity = rho.powf(-alpha);
    let a = arity.round();
    if (arity - a).abs() > 1e-6 * a {
        return Err(Error::invalid(format!("ρ^(−α) = {arity} is not an integer")));
    }
    let top = tree.height();
    for (i, node) in tree.nodes().iter().enumerate() {
        if node.height < top && tree.children(i).len() != a as usize {
            return Err(Error::invalid(format!(
                "node {} has {} children, expected {a}",
                tree.word(i),
                tree.children(i).len()
            )));
        }
    }
    Ok(tree.nodes().iter().map(|n| a.powi(-(n.height as i32))).collect())
}

/// Counters from a vertex scan.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ScanStats {
    pub vertices_scanned: usize,
    pub nodes_expanded: u64,
    /// 1 − g^n(0) for the cardinality part alone (an upper bound on the
    /// per-vertex success probability), when it was computed.
    pub predicted_presence: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
enum Mode {
    Cluster { j: usize, c: f64 },
    Block { n: usize, constant: f64 },
}

struct ScanResult {
    cluster: Vec<Vec<Letter>>,
    constant: f64,
}

const FILL_SALT: u64 = 0x66696c6c;

/// Lazy DP over the tree compressed along Π_{ρ^h}, relative to a vertex.
struct Engine<'a, T: RandomTree> {
    tree: &'a T,
    weights: Weights,
    rho: f64,
    arity: usize,
    mode: Mode,
    geo: Option<&'a GeometryContext>,
    memo: HashMap<(Vec<Letter>, usize), bool>,
    expanded: u64,
    budget: u64,
    seed: u64,
}

impl<'a, T: RandomTree> Engine<'a, T> {
    fn children(&mut self, w: &[Letter]) -> Result<Vec<Letter>> {
        self.expanded += 1;
        if self.expanded > self.budget {
            return Err(Error::ResourceLimit {
                what: "expanded tree nodes".into(),
                limit: self.budget as usize,
                depth: w.len(),
            });
        }
        Ok(self.tree.children(w))
    }

    fn cat(x: &[Letter], y: &[Letter]) -> Vec<Letter> {
        let mut v = x.to_vec();
        v.extend_from_slice(y);
        v
    }

    fn good(&mut self, x: &[Letter], t: f64, m: usize) -> Result<bool> {
        if m == 0 {
            return Ok(true);
        }
        let key = (x.to_vec(), m);
        if let Some(&g) = self.memo.get(&key) {
            return Ok(g);
        }
        let g = self.scan(x, t, m)?.is_some();
        self.memo.insert(key, g);
        Ok(g)
    }

    fn group_key(&self, y: &[Letter]) -> Option<Vec<Letter>> {
        let j = match self.mode {
            Mode::Cluster { j, .. } => j,
            Mode::Block { .. } => 2,
        };
        (y.len() >= j).then(|| y[..y.len() - j].to_vec())
    }

    /// Test a completed group of good children sharing a prefix.
    fn judge_group(&self, prefix: &[Letter], members: &[Vec<Letter>]) -> Option<ScanResult> {
        match self.mode {
            Mode::Block { n, constant } => (members.len() == n).then(|| ScanResult {
                cluster: members.to_vec(),
                constant: self.weights.ratio(prefix) * constant,
            }),
            Mode::Cluster { j, c } => {
                let geo = self.geo.expect("cluster mode has geometry");
                let suffixes: Vec<Word> =
                    members.iter().map(|y| Word(y[y.len() - j..].to_vec())).collect();
                geo.trim(&suffixes, c).map(|(keep, value)| ScanResult {
                    cluster: keep.into_iter().map(|i| members[i].clone()).collect(),
                    constant: self.weights.ratio(prefix) * value,
                })
            }
        }
    }

    /// Scan compressed children of x in lexicographic order until enough
    /// good ones and a structural witness are seen.
    fn scan(&mut self, x: &[Letter], t: f64, m: usize) -> Result<Option<ScanResult>> {
        let mut count = 0usize;
        let mut found: Option<ScanResult> = None;
        let mut group: Option<(Vec<Letter>, Vec<Vec<Letter>>)> = None;
        let mut stack: Vec<(Vec<Letter>, f64)> = vec![(vec![], 1.0)];
        while let Some((y, r)) = stack.pop() {
            if le_tol(r, t) && !y.is_empty() {
                let key = self.group_key(&y);
                if found.is_none() {
                    let same = matches!((&group, &key), (Some((g, _)), Some(k)) if g == k);
                    if !same {
                        if let Some((p, mem)) = group.take() {
                            found = self.judge_group(&p, &mem);
                        }
                        group = key.map(|k| (k, Vec::new()));
                    }
                }
                let xy = Self::cat(x, &y);
                let child_t = self.rho * t / r;
                if self.good(&xy, child_t, m - 1)? {
                    count += 1;
                    if let Some((_, mem)) = group.as_mut() {
                        mem.push(y);
                    }
                }
                if count >= self.arity && found.is_some() {
                    break;
                }
                continue;
            }
            let kids = self.children(&Self::cat(x, &y))?;
            for &l in kids.iter().rev() {
                let mut y2 = y.clone();
                y2.push(l);
                stack.push((y2, r * self.weights.get(l)));
            }
        }
        if found.is_none() {
            if let Some((p, mem)) = group.take() {
                found = self.judge_group(&p, &mem);
            }
        }
        Ok(if count >= self.arity { found } else { None })
    }

    /// Choose up to `quota` more good compressed children under x·y,
    /// spreading them evenly over the intermediate levels.
    #[allow(clippy::too_many_arguments)]
    fn fill(
        &mut self,
        x: &[Letter],
        t: f64,
        y: Vec<Letter>,
        r: f64,
        quota: usize,
        m: usize,
        chosen: &mut BTreeSet<Vec<Letter>>,
        exhausted: &mut HashSet<Vec<Letter>>,
    ) -> Result<usize> {
        if quota == 0 || exhausted.contains(&y) {
            return Ok(0);
        }
        if le_tol(r, t) && !y.is_empty() {
            if chosen.contains(&y) {
                return Ok(0);
            }
            let xy = Self::cat(x, &y);
            let ok = self.good(&xy, self.rho * t / r, m - 1)?;
            if ok {
                chosen.insert(y);
                return Ok(1);
            }
            exhausted.insert(y);
            return Ok(0);
        }
        let xy = Self::cat(x, &y);
        let mut kids = self.children(&xy)?;
        kids.shuffle(&mut node_rng(derive_seed(self.seed, FILL_SALT), &xy));
        let levels = ((t / r).ln() / self.weights.r_max().ln()).ceil().max(1.0);
        let fan = ((quota as f64).powf(1.0 / levels).ceil() as usize).clamp(1, kids.len().max(1));
        let mut added = 0;
        let weights = self.weights.clone();
        let child = |l: Letter| {
            let mut y2 = y.clone();
            y2.push(l);
            (y2, r * weights.get(l))
        };
        for (i, &l) in kids.iter().take(fan).enumerate() {
            let share = quota / fan + usize::from(i < quota % fan);
            let (y2, r2) = child(l);
            added += self.fill(x, t, y2, r2, share, m, chosen, exhausted)?;
        }
        for &l in &kids {
            if added >= quota {
                break;
            }
            let (y2, r2) = child(l);
            added += self.fill(x, t, y2, r2, quota - added, m, chosen, exhausted)?;
        }
        if added < quota {
            exhausted.insert(y);
        }
        Ok(added)
    }

    /// Materialize the selected subtree under a good node.
    fn extract(
        &mut self,
        x: &[Letter],
        t: f64,
        m: usize,
        out: &mut StarTree,
        id: usize,
        c_w: &mut f64,
    ) -> Result<()> {
        if m == 0 {
            return Ok(());
        }
        let scan = self
            .scan(x, t, m)?
            .ok_or_else(|| Error::Inconclusive("node lost its witness on rescan".into()))?;
        *c_w = c_w.min(scan.constant);
        let mut chosen: BTreeSet<Vec<Letter>> = scan.cluster.into_iter().collect();
        let quota = self.arity.saturating_sub(chosen.len());
        let mut exhausted = HashSet::new();
        self.fill(x, t, vec![], 1.0, quota, m, &mut chosen, &mut exhausted)?;
        if chosen.len() < self.arity {
            return Err(Error::Inconclusive(format!(
                "only {} of {} children could be filled",
                chosen.len(),
                self.arity
            )));
        }
        // Keep exactly `arity`: the witness came first, extras are trimmed
        // from the end if the cluster overshot.
        let picked: Vec<Vec<Letter>> = chosen.into_iter().collect();
        for y in picked.into_iter().take(self.arity) {
            let r = self.weights.ratio(&y);
            let cid = out.add_child(id, Word(y.clone()));
            let xy = Self::cat(x, &y);
            self.extract(&xy, self.rho * t / r, m - 1, out, cid, c_w)?;
        }
        Ok(())
    }
}

/// Tunables shared by both pipelines.
#[derive(Clone, Debug, Serialize)]
pub struct ScanOptions {
    /// Compressed levels n of the extracted subtree (None: as many as fit
    /// under `leaf_budget` leaves).
    pub levels: Option<usize>,
    pub leaf_budget: usize,
    pub max_vertices: usize,
    /// Deepest compressed level at which vertices are scanned.
    pub max_vertex_level: usize,
    pub node_budget: u64,
    pub directions: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            levels: None,
            leaf_budget: 1_000_000,
            max_vertices: 10_000,
            max_vertex_level: 3,
            node_budget: 50_000_000,
            directions: COARSE_DIRECTIONS,
        }
    }
}

/// Certificates attached to an extracted subset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificates {
    pub arity: usize,
    pub alpha: f64,
    /// Diffuseness constant of every node's chosen children, in the node frame.
    pub c_w: f64,
    /// Hyperplane diffuseness constant of the projected set.
    pub beta: f64,
    pub rho: f64,
    pub diameter_bound: f64,
    /// Scales on which the diffuseness certificate is meaningful.
    pub scale_window: (f64, f64),
}

/// A constructively extracted diffuse Ahlfors-regular subset.
#[derive(Clone, Debug)]
pub struct ExtractedSubset {
    pub root: Word,
    pub root_map: SimilarityMap,
    pub tree: StarTree,
    pub masses: Vec<f64>,
    pub node_maps: Vec<SimilarityMap>,
    pub ifs: SimilarityIfs,
    pub base: Point,
    pub cloud: PointCloud,
    pub levels: usize,
    pub certificates: Certificates,
    pub stats: ScanStats,
}

#[derive(Serialize)]
struct SubsetSummary<'a> {
    root: String,
    root_depth: usize,
    levels: usize,
    leaves: usize,
    certificates: &'a Certificates,
    stats: &'a ScanStats,
}

impl ExtractedSubset {
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::to_value(SubsetSummary {
            root: self.root.to_string(),
            root_depth: self.root.len(),
            levels: self.levels,
            leaves: self.cloud.len(),
            certificates: &self.certificates,
            stats: &self.stats,
        })
        .expect("serializable")
    }

    /// Write `subset.json`, `tree.txt`, `measure.csv` and `cloud.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut doc = self.summary_json();
        doc["ifs"] = serde_json::from_str(&self.ifs.to_json())?;
        doc["base"] = serde_json::json!([self.base.x, self.base.y, self.base.z]);
        std::fs::write(dir.join("subset.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        std::fs::write(dir.join("tree.txt"), self.tree.to_text())?;
        std::fs::write(dir.join("measure.csv"), self.measure_csv())?;
        std::fs::write(dir.join("cloud.csv"), self.cloud.to_csv())?;
        Ok(())
    }

    /// Rebuild a subset written by [`ExtractedSubset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("subset.json"))?)?;
        let field = |k: &str| doc.get(k).cloned().ok_or_else(|| Error::invalid(format!("subset.json lacks {k:?}")));
        let ifs = SimilarityIfs::from_json(&field("ifs")?.to_string())?;
        let certificates: Certificates = serde_json::from_value(field("certificates")?)?;
        let stats: ScanStats = serde_json::from_value(field("stats")?)?;
        let root = Word::parse(field("root")?.as_str().unwrap_or_default())?;
        let levels = field("levels")?.as_u64().ok_or_else(|| Error::invalid("levels must be an integer"))? as usize;
        let b: Vec<f64> = serde_json::from_value(field("base")?)?;
        if b.len() != 3 {
            return Err(Error::invalid("base must have three coordinates"));
        }
        let base = Point::new(b[0], b[1], b[2]);
        let tree = StarTree::from_text(&std::fs::read_to_string(dir.join("tree.txt"))?)?;
        let masses = natural_measure(&tree, certificates.rho, certificates.alpha)?;
        let root_map = ifs.word_map(&root)?;
        let node_maps = star_node_maps(&ifs, &tree, &root_map)?;
        let cloud = render_star(&ifs, &tree, &root_map, Some(base))?;
        Ok(ExtractedSubset {
            root,
            root_map,
            tree,
            masses,
            node_maps,
            ifs,
            base,
            cloud,
            levels,
            certificates,
            stats,
        })
    }

    /// `word,height,mass` per node, words relative to the root vertex.
    pub fn measure_csv(&self) -> String {
        let mut rows: Vec<(Word, usize, f64)> = (0..self.tree.len())
            .map(|i| (self.tree.word(i), self.tree.node(i).height, self.masses[i]))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut s = String::from("word,height,mass\n");
        for (w, h, m) in rows {
            s.push_str(&format!("{w},{h},{m:e}\n"));
        }
        s
    }

    pub fn measured(&self) -> MeasuredTree<'_> {
        MeasuredTree {
            tree: &self.tree,
            masses: &self.masses,
            maps: &self.node_maps,
            ball: self.ifs.bounding_ball(),
        }
    }

    /// Radii ladder for Ahlfors checks between the leaf scale and the set's
    /// diameter bound.
    pub fn ahlfors_radii(&self, count: usize) -> Vec<f64> {
        let diam = self.certificates.diameter_bound * self.root_map.ratio;
        geometric_ladder(4.0 * self.cloud.eps, diam / 2.0, count)
    }

    /// Three geometric scales across the certified window.
    pub fn diffuse_scales(&self) -> Vec<f64> {
        let (lo, hi) = self.certificates.scale_window;
        geometric_ladder(lo, hi, 3)
    }
}

/// Largest arity considered; anything bigger cannot fit a leaf budget.
const MAX_ARITY: f64 = (1u64 << 24) as f64;

/// Whether a computed power is an integer up to floating-point error. powi
/// over at most 64 factors stays inside 1e-13 relative, and the cap keeps the
/// absolute slack below 2e-6 so near misses are not taken for integers.
fn is_integral(v: f64) -> bool {
    let r = v.round();
    (1.0..=MAX_ARITY).contains(&r) && (v - r).abs() <= 1e-13 * r
}

/// Smallest k with c^k an integer and ≥ `floor`.
pub fn minimal_block_length(c: f64, floor: u64) -> Option<usize> {
    (1..=64).find(|&k| {
        let v = c.powi(k as i32);
        let r = v.round();
        is_integral(v) && r >= floor as f64
    })
}

/// How the percolation pipeline certifies diffuseness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum PercolationWitness {
    /// A group of sibling cells whose constant is at least c (default c).
    SectionDiffuse { c: f64 },
    /// A complete (Λ_b)² block below some prefix.
    Block,
}

/// Default group threshold for percolation.
pub const DEFAULT_GROUP_C: f64 = 0.05;

#[derive(Clone, Debug, Serialize)]
pub struct PercolationParams {
    pub b: u32,
    pub d: u32,
    pub p: f64,
    pub c: f64,
    pub k: Option<usize>,
    pub witness: PercolationWitness,
}

/// Extract a c^k-ary diffuse subtree from a fractal percolation sample.
pub fn percolation_pipeline(params: &PercolationParams, opts: &ScanOptions, seed: u64) -> Result<ExtractedSubset> {
    let PercolationParams { b, d, p, c, .. } = *params;
    if !(2..=3).contains(&d) {
        return Err(Error::invalid("d must be 2 or 3"));
    }
    let n_letters = b.pow(d);
    let m = p * f64::from(n_letters);
    if m <= 1.0 {
        return Err(Error::invalid(format!("m = {m} ≤ 1: not supercritical")));
    }
    if !(c > 1.0 && c < m) {
        return Err(Error::invalid(format!("c = {c} must lie in (1, m = {m})")));
    }
    let floor = u64::from(n_letters).pow(2);
    let k = match params.k {
        Some(k) => {
            let v = c.powi(k as i32);
            if !is_integral(v) || v.round() < floor as f64 {
                return Err(Error::invalid(format!("c^k = {v} must be an integer ≥ b^(2d) = {floor}")));
            }
            k
        }
        None => minimal_block_length(c, floor)
            .ok_or_else(|| Error::invalid(format!("no k ≤ 64 makes c^k an integer ≥ {floor}")))?,
    };
    let arity = c.powi(k as i32).round() as usize;
    let ifs = SimilarityIfs::percolation(b, d as usize)?;
    let offspring = OffspringDistribution::binomial(n_letters, p)?;
    let rho = f64::from(b).powi(-(k as i32));
    let geo = GeometryContext::new(ifs.clone(), opts.directions);
    let (mode, group_depth) = match params.witness {
        PercolationWitness::SectionDiffuse { c } => (Mode::Cluster { j: 1, c }, 1),
        PercolationWitness::Block => {
            let all: Vec<Word> = (0..n_letters)
                .flat_map(|a| (0..n_letters).map(move |b2| Word(vec![a, b2])))
                .collect();
            let full = GeometryContext::new(ifs.clone(), crate::geometry::DEFAULT_DIRECTIONS);
            (Mode::Block { n: (n_letters * n_letters) as usize, constant: full.group_constant(&all) }, 2)
        }
    };
    if k < group_depth {
        return Err(Error::invalid("block length too short for the witness"));
    }
    let alpha = c.ln() / f64::from(b).ln();
    let mut sub = run_pipeline(
        &ifs,
        &offspring,
        rho,
        arity,
        alpha,
        mode,
        Some(&geo),
        ifs.centroid(),
        opts,
        seed,
    )?;
    // Compressed maps all have ratio ρ, so β = c_W · ρ / diam K.
    sub.certificates.beta = sub.certificates.c_w * rho / sub.certificates.diameter_bound;
    Ok(sub)
}

/// Extract a ρ^{−α}-ary section-diffuse subtree for a general IFS.
#[derive(Clone, Debug, Serialize)]
pub struct GeneralParams {
    pub rho: f64,
    pub alpha: f64,
    /// Group threshold; None picks a quarter of the certified constant of
    /// the chosen section.
    pub c: Option<f64>,
}

/// Shallowest j ≤ 4 whose full Λ^j system has certified constant > c.
pub fn section_reduction(ifs: &SimilarityIfs, c: f64, directions: usize) -> Option<(usize, f64)> {
    let geo = GeometryContext::new(ifs.clone(), directions);
    let n = ifs.len() as u32;
    (1..=4usize).find_map(|j| {
        let count = (n as usize).checked_pow(j as u32)?;
        if count > 4096 {
            return None;
        }
        let words: Vec<Word> = (0..count as u32).map(|x| Word(decode_block(x, n, j))).collect();
        let v = geo.group_constant(&words);
        (v > c).then_some((j, v))
    })
}

pub fn general_pipeline(
    ifs: &SimilarityIfs,
    offspring: &OffspringDistribution,
    params: &GeneralParams,
    opts: &ScanOptions,
    seed: u64,
) -> Result<ExtractedSubset> {
    let GeneralParams { rho, alpha, .. } = *params;
    if offspring.alphabet_size() as usize != ifs.len() {
        return Err(Error::invalid("offspring alphabet and IFS size differ"));
    }
    let weights = ifs.weights();
    if !(rho > 0.0 && rho < weights.r_min()) {
        return Err(Error::invalid(format!("ρ = {rho} must lie in (0, r_min = {})", weights.r_min())));
    }
    let delta = crate::geometry::moran_exponent(offspring, &weights, 1e-12)?;
    if !(alpha > 0.0 && alpha < delta) {
        return Err(Error::invalid(format!("α = {alpha} must lie in (0, δ = {delta:.6})")));
    }
    let arity_f = rho.powf(-alpha);
    let arity = arity_f.round();
    if (arity_f - arity).abs() > 1e-6 * arity {
        return Err(Error::invalid(format!("ρ^(−α) = {arity_f} is not an integer")));
    }
    let arity = arity as usize;
    let render = crate::geometry::render_full(ifs, attractor_depth(ifs), None)?;
    let diam = ifs.diameter_bound();
    if width(&render).width <= 1e-6 * diam {
        return Err(Error::invalid("the attractor is planar (render width ≈ 0)"));
    }
    let probe_c = params.c.unwrap_or(1e-3 * diam);
    let (j, full_c) = section_reduction(ifs, probe_c, opts.directions).ok_or_else(|| {
        Error::Capability("no section up to depth 4 has a certified diffuseness constant above c".into())
    })?;
    let c = params.c.unwrap_or(full_c / 4.0);
    let sec_alphabet = ifs.len().pow(j as u32) as f64;
    let ratios = weights.as_slice();
    let (rmin, rmax) = (weights.r_min().powi(j as i32), weights.r_max().powi(j as i32));
    let _ = ratios;
    let n0 = (2.0 * rmin.ln() / rmax.ln()).ceil();
    if (arity as f64) < sec_alphabet.powf(n0) {
        return Err(Error::invalid(format!(
            "ρ^(−α) = {arity} must be at least |Λ^{j}|^{n0} = {}",
            sec_alphabet.powf(n0)
        )));
    }
    let geo = GeometryContext::new(ifs.clone(), opts.directions);
    let base = ifs.maps[0].fixed_point();
    let mut sub = run_pipeline(
        ifs,
        offspring,
        rho,
        arity,
        alpha,
        Mode::Cluster { j, c },
        Some(&geo),
        base,
        opts,
        seed,
    )?;
    sub.certificates.beta =
        rho * sub.certificates.c_w * weights.r_min() / sub.certificates.diameter_bound;
    Ok(sub)
}

fn attractor_depth(ifs: &SimilarityIfs) -> usize {
    let n = ifs.len() as f64;
    ((2e4f64).ln() / n.ln()).floor().max(1.0) as usize
}

#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    ifs: &SimilarityIfs,
    offspring: &OffspringDistribution,
    rho: f64,
    arity: usize,
    alpha: f64,
    mode: Mode,
    geo: Option<&GeometryContext>,
    base: Point,
    opts: &ScanOptions,
    seed: u64,
) -> Result<ExtractedSubset> {
    let weights = ifs.weights();
    let levels = match opts.levels {
        Some(n) if n >= 1 => n,
        Some(_) => return Err(Error::invalid("levels must be at least 1")),
        None => {
            let mut n = 1;
            while (arity as f64).powi(n as i32 + 1) <= opts.leaf_budget as f64 {
                n += 1;
            }
            n
        }
    };
    if (arity as f64).powi(levels as i32) > 4.0 * opts.leaf_budget as f64 {
        return Err(Error::ResourceLimit {
            what: "extracted leaves".into(),
            limit: opts.leaf_budget,
            depth: levels,
        });
    }
    let realization = GwRealization::new(offspring.clone(), seed);
    let mut engine = Engine {
        tree: &realization,
        weights: weights.clone(),
        rho,
        arity,
        mode,
        geo,
        memo: HashMap::new(),
        expanded: 0,
        budget: opts.node_budget,
        seed,
    };
    let mut stats = ScanStats::default();
    let mut queue: VecDeque<(Vec<Letter>, usize)> = VecDeque::from([(vec![], 0)]);
    let mut hit = None;
    while let Some((v, lvl)) = queue.pop_front() {
        if stats.vertices_scanned >= opts.max_vertices {
            break;
        }
        stats.vertices_scanned += 1;
        engine.memo.clear();
        if engine.good(&v, rho, levels)? {
            hit = Some(v);
            break;
        }
        if lvl < opts.max_vertex_level {
            // Compressed children of v relative to v, breadth first.
            let mut stack: Vec<(Vec<Letter>, f64)> = vec![(vec![], 1.0)];
            let mut found = Vec::new();
            while let Some((y, r)) = stack.pop() {
                if le_tol(r, rho) && !y.is_empty() {
                    found.push(y);
                    continue;
                }
                let kids = engine.children(&Engine::<GwRealization>::cat(&v, &y))?;
                for &l in kids.iter().rev() {
                    let mut y2 = y.clone();
                    y2.push(l);
                    stack.push((y2, r * weights.get(l)));
                }
            }
            for y in found {
                queue.push_back((Engine::<GwRealization>::cat(&v, &y), lvl + 1));
            }
        }
    }
    stats.nodes_expanded = engine.expanded;
    let Some(v) = hit else {
        let mut msg = format!(
            "no vertex with a {arity}-ary witness subtree of {levels} levels among {} scanned ({} nodes expanded)",
            stats.vertices_scanned, stats.nodes_expanded
        );
        if weights.is_uniform() {
            let k = (rho.ln() / weights.r_max().ln()).round() as usize;
            if let Ok(q) = predicted_ary_presence(offspring, k, arity as u64, levels, 20_000, seed) {
                msg.push_str(&format!("; predicted per-vertex success ≤ {q:.4}"));
            }
        }
        return Err(Error::NotFound(msg));
    };
    let mut tree = StarTree::new(ifs.len() as u32);
    let mut c_w = f64::INFINITY;
    let root = tree.root();
    engine.memo.clear();
    engine.extract(&v, rho, levels, &mut tree, root, &mut c_w)?;
    stats.nodes_expanded = engine.expanded;
    if !c_w.is_finite() {
        c_w = 0.0;
    }
    let masses = natural_measure(&tree, rho, alpha)?;
    let root_map = ifs.word_map(&v)?;
    let node_maps = star_node_maps(ifs, &tree, &root_map)?;
    let cloud = render_star(ifs, &tree, &root_map, Some(base))?;
    let diam = ifs.diameter_bound();
    let diam_d = diam * root_map.ratio;
    let upper_ratio = tree
        .at_height(levels.saturating_sub(1))
        .iter()
        .map(|&i| node_maps[i].ratio / root_map.ratio)
        .fold(0.0, f64::max);
    let lo = if levels >= 2 { 2.0 * diam_d * upper_ratio } else { 8.0 * cloud.eps };
    let lo = lo.max(8.0 * cloud.eps);
    let window = (lo, (diam_d / 2.0).max(lo));
    let certificates = Certificates {
        arity,
        alpha,
        c_w,
        beta: 0.0,
        rho,
        diameter_bound: diam,
        scale_window: window,
    };
    Ok(ExtractedSubset {
        root: Word(v),
        root_map,
        tree,
        masses,
        node_maps,
        ifs: ifs.clone(),
        base,
        cloud,
        levels,
        certificates,
        stats,
    })
}

/// 1 − g^n(0) for g(s) = P(Z_k^(s) < a): presence of an a-ary subtree of
/// the k-compressed tree, ignoring structural requirements.
pub fn predicted_ary_presence(
    offspring: &OffspringDistribution,
    k: usize,
    a: u64,
    n: usize,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    let exact = fixpoint::generation_size_distributions(offspring, k).ok();
    let mut q = 0.0;
    for i in 0..n {
        q = match &exact {
            Some(d) => d[k]
                .iter()
                .enumerate()
                .map(|(z, pz)| pz * fixpoint::binom_cdf(z as u64, 1.0 - q, a as i64 - 1))
                .sum::<f64>()
                .min(1.0),
            None => {
                if q >= 1.0 {
                    1.0
                } else {
                    fixpoint::g_k_a_monte_carlo(offspring, k, a, q, trials, derive_seed(seed, i as u64)).estimate
                }
            }
        };
    }
    Ok(1.0 - q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branching::sample_gw;

    fn w(v: &[u32]) -> Word {
        Word(v.to_vec())
    }

    #[test]
    fn block_length_needs_an_integral_power() {
        assert_eq!(minimal_block_length(3.0, 81), Some(4));
        assert_eq!(minimal_block_length(2f64.sqrt(), 4), Some(4));
        // Large powers of 1.5 are never integers, however close in relative terms.
        assert_eq!(minimal_block_length(1.5, 81), None);
        assert_eq!(minimal_block_length(2.6, 81), None);
    }

    #[test]
    fn full_tree_ary_returns_full_tree() {
        let t = FiniteTree::full(3, 3).unwrap();
        let s = find_subtree(&t, &SubtreePredicate::Ary(3), &PredContext::default(), 3).unwrap().unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn ary_witness_is_lexicographic() {
        let t = FiniteTree::full(3, 2).unwrap();
        let s = find_subtree(&t, &SubtreePredicate::Ary(2), &PredContext::default(), 2).unwrap().unwrap();
        assert_eq!(s.level_size(2), 4);
        assert!(s.contains(&[1, 1]) && !s.contains(&[2]));
    }

    #[test]
    fn diffuse_block_negative_and_positive() {
        let pred = SubtreePredicate::DiffuseBlock { b: 3, d: 1, k: 3 };
        let ctx = PredContext::default();
        let full: Vec<Word> = (0..9).map(|x| w(&[1, x / 3, x % 3])).collect();
        assert!(pred.accepts(&ctx, &full).unwrap());
        assert!(!pred.accepts(&ctx, &full[..8]).unwrap());
        let coll = diffuse_block_collection(3, 1, 3).unwrap();
        let labels: Vec<u32> = (0..9).map(|x| 9 + x).collect();
        assert!(coll.closure_member(&labels));
        assert!(!coll.closure_member(&labels[1..]));
    }

    #[test]
    fn intersection_pads_with_smallest_extras() {
        let pred = SubtreePredicate::Intersection(vec![
            SubtreePredicate::DiffuseBlock { b: 2, d: 1, k: 2 },
            SubtreePredicate::CardinalityAtLeast(6),
        ]);
        let kids: Vec<Word> = [[0, 0], [0, 1], [1, 0], [1, 1], [2, 0], [2, 1], [3, 0]]
            .iter()
            .map(|x| w(x))
            .collect();
        let wit = pred.witness(&PredContext::default(), &kids).unwrap().unwrap();
        assert_eq!(wit.indices, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn section_diffuse_on_grid() {
        let ifs = SimilarityIfs::percolation(3, 2).unwrap();
        let ctx = PredContext { block: None, geometry: Some(GeometryContext::new(ifs, 200)) };
        let pred = SubtreePredicate::SectionDiffuse { c: 0.05, j: 1 };
        let all: Vec<Word> = (0..9).map(|x| w(&[x])).collect();
        let wit = pred.witness(&ctx, &all).unwrap().unwrap();
        assert!(wit.indices.len() >= 3 && wit.indices.len() < 9);
        assert!(wit.constant >= 0.05);
        let row: Vec<Word> = [0u32, 1, 2].iter().map(|&x| w(&[x])).collect();
        assert!(!pred.accepts(&ctx, &row).unwrap());
    }

    #[test]
    fn lazy_and_materialized_agree() {
        let off = OffspringDistribution::binomial(3, 0.7).unwrap();
        for seed in 0..40 {
            let s = sample_gw(&off, 4, seed).unwrap();
            let dp = find_subtree(&s.tree, &SubtreePredicate::Ary(2), &PredContext::default(), 4)
                .unwrap()
                .is_some();
            let lazy = lazy_has_ary_subtree(&GwRealization::new(off.clone(), seed), &[], 2, 4);
            assert_eq!(dp, lazy, "seed {seed}");
        }
    }

    #[test]
    fn natural_measure_conserves_mass() {
        let mut t = StarTree::new(9);
        for i in 0..3 {
            let c = t.add_child(0, w(&[i]));
            for j in 0..3 {
                t.add_child(c, w(&[j, 1]));
            }
        }
        let m = natural_measure(&t, 1.0 / 9.0, 0.5).unwrap();
        assert_eq!(m[0], 1.0);
        for h in 0..=2 {
            let s: f64 = t.at_height(h).iter().map(|&i| m[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(natural_measure(&t, 1.0 / 16.0, 0.5).is_err());
    }

    #[test]
    fn percolation_pipeline_p_one_block_mode() {
        let params = PercolationParams {
            b: 2,
            d: 2,
            p: 1.0,
            c: 2.0,
            k: None,
            witness: PercolationWitness::Block,
        };
        let opts = ScanOptions { levels: Some(1), ..ScanOptions::default() };
        let sub = percolation_pipeline(&params, &opts, 3).unwrap();
        assert_eq!(sub.certificates.arity, 16);
        assert_eq!(sub.root, Word::root());
        assert_eq!(sub.cloud.len(), 16);
        assert!(sub.certificates.beta > 0.0);
    }
}
