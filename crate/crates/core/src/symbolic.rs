//! Words, finite trees, sections and the two tree compressions.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Letter = u32;

/// Relative tolerance for weight comparisons against section thresholds.
pub const REL_TOL: f64 = 1e-12;

/// Default node budget for section enumeration and tree sampling.
pub const DEFAULT_NODE_BUDGET: usize = 10_000_000;

/// `a ≤ b` up to the relative boundary tolerance; ties count as `≤`.
#[inline]
pub fn le_tol(a: f64, b: f64) -> bool {
    a <= b * (1.0 + REL_TOL)
}

/// A finite word over the alphabet `0..N`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Word(pub Vec<Letter>);

impl Word {
    pub fn root() -> Self {
        Word(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn letters(&self) -> &[Letter] {
        &self.0
    }

    pub fn child(&self, l: Letter) -> Word {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(l);
        Word(v)
    }

    pub fn concat(&self, other: &[Letter]) -> Word {
        let mut v = Vec::with_capacity(self.0.len() + other.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(other);
        Word(v)
    }

    pub fn parent(&self) -> Option<Word> {
        if self.0.is_empty() {
            None
        } else {
            Some(Word(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn is_prefix_of(&self, other: &[Letter]) -> bool {
        other.len() >= self.0.len() && other[..self.0.len()] == self.0[..]
    }

    /// Parse the hyphen-separated text form; the empty string is the root.
    pub fn parse(s: &str) -> Result<Word> {
        if s.is_empty() {
            return Ok(Word::root());
        }
        s.split('-')
            .map(|t| {
                t.parse::<Letter>()
                    .map_err(|_| Error::invalid(format!("bad letter {t:?} in word {s:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Word)
    }
}

impl std::ops::Deref for Word {
    type Target = [Letter];
    fn deref(&self) -> &[Letter] {
        &self.0
    }
}

impl From<Vec<Letter>> for Word {
    fn from(v: Vec<Letter>) -> Self {
        Word(v)
    }
}

impl From<&[Letter]> for Word {
    fn from(v: &[Letter]) -> Self {
        Word(v.to_vec())
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Big-endian block encoding of `letters` over an alphabet of size `base`.
pub fn encode_block(letters: &[Letter], base: u32) -> Letter {
    letters.iter().fold(0u32, |acc, &l| acc * base + l)
}

/// Inverse of [`encode_block`].
pub fn decode_block(mut code: Letter, base: u32, k: usize) -> Vec<Letter> {
    let mut out = vec![0; k];
    for slot in out.iter_mut().rev() {
        *slot = code % base;
        code /= base;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rec {
    parent: u32,
    letter: Letter,
    start: u32,
    end: u32,
}

/// Handle to a node of a [`FiniteTree`]: its level and its rank in that level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

/// A prefix-closed set of words of length at most `depth`.
///
/// Stored level by level; each level is sorted lexicographically and the
/// children of a node form a contiguous run of the next level.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteTree {
    alphabet: u32,
    depth: usize,
    levels: Vec<Vec<Rec>>,
}

const NO_PARENT: u32 = u32::MAX;

impl FiniteTree {
    /// Grow a tree breadth-first, asking `children_of` for the child letters
    /// of each node. Levels are expanded in parallel; the result does not
    /// depend on the thread count.
    pub fn grow<F>(alphabet: u32, depth: usize, budget: usize, children_of: F) -> Result<Self>
    where
        F: Fn(&[Letter]) -> Vec<Letter> + Sync,
    {
        let mut levels = vec![vec![Rec {
            parent: NO_PARENT,
            letter: 0,
            start: 0,
            end: 0,
        }]];
        let mut words: Vec<Vec<Letter>> = vec![Vec::new()];
        let mut total = 1usize;
        for level in 0..depth {
            if words.is_empty() {
                levels.push(Vec::new());
                continue;
            }
            let kids: Vec<Vec<Letter>> = words
                .par_iter()
                .map(|w| {
                    let mut c = children_of(w);
                    c.sort_unstable();
                    c.dedup();
                    c
                })
                .collect();
            let count: usize = kids.iter().map(Vec::len).sum();
            total += count;
            if total > budget {
                return Err(Error::ResourceLimit {
                    what: "tree node budget".into(),
                    limit: budget,
                    depth: level,
                });
            }
            let mut next = Vec::with_capacity(count);
            let mut next_words = Vec::with_capacity(count);
            for (pi, (w, cs)) in words.iter().zip(&kids).enumerate() {
                let start = next.len() as u32;
                for &l in cs {
                    if l >= alphabet {
                        return Err(Error::invalid(format!(
                            "letter {l} outside alphabet of size {alphabet}"
                        )));
                    }
                    next.push(Rec {
                        parent: pi as u32,
                        letter: l,
                        start: 0,
                        end: 0,
                    });
                    let mut nw = w.clone();
                    nw.push(l);
                    next_words.push(nw);
                }
                let end = next.len() as u32;
                if end > start {
                    let rec = &mut levels[level][pi];
                    rec.start = start;
                    rec.end = end;
                }
            }
            levels.push(next);
            words = next_words;
        }
        Ok(FiniteTree {
            alphabet,
            depth,
            levels,
        })
    }

    /// Build from an explicit prefix-closed word set.
    pub fn from_words<I>(alphabet: u32, depth: usize, words: I) -> Result<Self>
    where
        I: IntoIterator<Item = Word>,
    {
        let set: BTreeSet<Word> = words.into_iter().collect();
        if !set.contains(&Word::root()) {
            return Err(Error::invalid("tree must contain the root"));
        }
        let mut by_level: Vec<Vec<&Word>> = vec![Vec::new(); depth + 1];
        for w in &set {
            if w.len() > depth {
                return Err(Error::invalid(format!("word {w} longer than depth {depth}")));
            }
            if let Some(&l) = w.iter().find(|&&l| l >= alphabet) {
                return Err(Error::invalid(format!(
                    "letter {l} outside alphabet of size {alphabet}"
                )));
            }
            if let Some(p) = w.parent() {
                if !set.contains(&p) {
                    return Err(Error::invalid(format!("word {w} has no parent in the set")));
                }
            }
            by_level[w.len()].push(w);
        }
        let mut levels: Vec<Vec<Rec>> = Vec::with_capacity(depth + 1);
        for (n, ws) in by_level.iter().enumerate() {
            let mut recs = Vec::with_capacity(ws.len());
            for w in ws {
                let parent = if n == 0 {
                    NO_PARENT
                } else {
                    let p = &w[..n - 1];
                    by_level[n - 1]
                        .binary_search_by(|q| q.letters().cmp(p))
                        .expect("parent present") as u32
                };
                recs.push(Rec {
                    parent,
                    letter: w.last().copied().unwrap_or(0),
                    start: 0,
                    end: 0,
                });
            }
            levels.push(recs);
        }
        for n in 1..=depth {
            let (prev, cur) = levels.split_at_mut(n);
            let prev = &mut prev[n - 1];
            for (i, r) in cur[0].iter().enumerate() {
                let p = &mut prev[r.parent as usize];
                if p.end == 0 && p.start == 0 {
                    p.start = i as u32;
                }
                p.end = i as u32 + 1;
            }
        }
        Ok(FiniteTree {
            alphabet,
            depth,
            levels,
        })
    }

    /// The full `alphabet`-ary tree of the given depth.
    pub fn full(alphabet: u32, depth: usize) -> Result<Self> {
        Self::grow(alphabet, depth, usize::MAX, |_| (0..alphabet).collect())
    }

    pub fn alphabet(&self) -> u32 {
        self.alphabet
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn level_size(&self, n: usize) -> usize {
        self.levels.get(n).map_or(0, Vec::len)
    }

    /// Z_0, ..., Z_depth.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// First empty level, if any.
    pub fn extinct_at(&self) -> Option<usize> {
        self.levels.iter().position(Vec::is_empty)
    }

    pub fn root(&self) -> NodeId {
        NodeId { level: 0, index: 0 }
    }

    pub fn level(&self, n: usize) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.level_size(n)).map(move |index| NodeId { level: n, index })
    }

    fn rec(&self, id: NodeId) -> &Rec {
        &self.levels[id.level][id.index]
    }

    pub fn letter(&self, id: NodeId) -> Letter {
        self.rec(id).letter
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        (id.level > 0).then(|| NodeId {
            level: id.level - 1,
            index: self.rec(id).parent as usize,
        })
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = NodeId> {
        let r = *self.rec(id);
        let level = id.level + 1;
        (r.start as usize..r.end as usize).map(move |index| NodeId { level, index })
    }

    pub fn child_count(&self, id: NodeId) -> usize {
        let r = self.rec(id);
        (r.end - r.start) as usize
    }

    pub fn child_letters(&self, id: NodeId) -> Vec<Letter> {
        self.children(id).map(|c| self.letter(c)).collect()
    }

    pub fn word(&self, id: NodeId) -> Word {
        let mut v = vec![0; id.level];
        let mut cur = id;
        while cur.level > 0 {
            v[cur.level - 1] = self.letter(cur);
            cur = self.parent(cur).expect("non-root has parent");
        }
        Word(v)
    }

    pub fn find(&self, word: &[Letter]) -> Option<NodeId> {
        if word.len() > self.depth {
            return None;
        }
        let mut cur = self.root();
        for &l in word {
            let r = *self.rec(cur);
            let next = &self.levels[cur.level + 1][r.start as usize..r.end as usize];
            let pos = next.binary_search_by(|x| x.letter.cmp(&l)).ok()?;
            cur = NodeId {
                level: cur.level + 1,
                index: r.start as usize + pos,
            };
        }
        Some(cur)
    }

    pub fn contains(&self, word: &[Letter]) -> bool {
        self.find(word).is_some()
    }

    /// All words in lexicographic order.
    pub fn words(&self) -> Vec<Word> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![self.root()];
        while let Some(id) = stack.pop() {
            out.push(self.word(id));
            let kids: Vec<NodeId> = self.children(id).collect();
            stack.extend(kids.into_iter().rev());
        }
        out
    }

    /// The descendant tree T^v, of depth `depth − |v|`.
    pub fn subtree(&self, id: NodeId) -> FiniteTree {
        let depth = self.depth - id.level;
        let mut levels = Vec::with_capacity(depth + 1);
        levels.push(vec![Rec {
            parent: NO_PARENT,
            ..*self.rec(id)
        }]);
        let (mut lo, mut hi) = (id.index, id.index + 1);
        for n in id.level..self.depth {
            let cur = &self.levels[n][lo..hi];
            let (nlo, nhi) = match (cur.first(), cur.last()) {
                (Some(a), Some(b)) => (a.start as usize, b.end as usize),
                _ => (0, 0),
            };
            let next: Vec<Rec> = self.levels[n + 1][nlo..nhi]
                .iter()
                .map(|r| Rec {
                    parent: r.parent - lo as u32,
                    letter: r.letter,
                    start: r.start,
                    end: r.end,
                })
                .collect();
            levels.push(next);
            let last = levels.len() - 2;
            for r in levels[last].iter_mut() {
                if r.start == r.end {
                    r.start = 0;
                    r.end = 0;
                } else {
                    r.start -= nlo as u32;
                    r.end -= nlo as u32;
                }
            }
            lo = nlo;
            hi = nhi;
        }
        let last = levels.len() - 1;
        for r in levels[last].iter_mut() {
            r.start = 0;
            r.end = 0;
        }
        FiniteTree {
            alphabet: self.alphabet,
            depth,
            levels,
        }
    }

    /// Keep only the first `depth` levels.
    pub fn truncate(&self, depth: usize) -> FiniteTree {
        let depth = depth.min(self.depth);
        let mut levels: Vec<Vec<Rec>> = self.levels[..=depth].to_vec();
        for r in levels[depth].iter_mut() {
            r.start = 0;
            r.end = 0;
        }
        FiniteTree {
            alphabet: self.alphabet,
            depth,
            levels,
        }
    }

    /// Line-oriented text form: a header, then one word per line in
    /// lexicographic order (the root is the empty line).
    pub fn to_text(&self) -> String {
        let mut s = format!("# gwfract-tree alphabet={} depth={}\n", self.alphabet, self.depth);
        for w in self.words() {
            s.push_str(&w.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let (alphabet, depth) = parse_header(header, "gwfract-tree")?;
        let depth = depth.ok_or_else(|| Error::invalid("tree header lacks depth"))?;
        let body: Vec<&str> = lines.collect();
        let words = parse_word_lines(&body)?;
        Self::from_words(alphabet, depth, words)
    }
}

fn parse_header(header: &str, tag: &str) -> Result<(u32, Option<usize>)> {
    let rest = header
        .strip_prefix(&format!("# {tag} "))
        .ok_or_else(|| Error::invalid(format!("expected header '# {tag} ...'")))?;
    let mut alphabet = None;
    let mut depth = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("alphabet", v)) => alphabet = v.parse().ok(),
            Some(("depth", v)) => depth = v.parse().ok(),
            _ => return Err(Error::invalid(format!("bad header field {kv:?}"))),
        }
    }
    Ok((
        alphabet.ok_or_else(|| Error::invalid("header lacks alphabet"))?,
        depth,
    ))
}

fn parse_word_lines(body: &[&str]) -> Result<Vec<Word>> {
    // The text ends with '\n', so the final split piece is empty.
    let n = match body.last() {
        Some(&"") => body.len() - 1,
        _ => return Err(Error::invalid("text must end with a newline")),
    };
    let words = body[..n]
        .iter()
        .map(|l| Word::parse(l))
        .collect::<Result<Vec<_>>>()?;
    if words.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("words must be strictly increasing"));
    }
    Ok(words)
}

/// Positive contraction weights r_i ∈ (0,1), one per letter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.is_empty() {
            return Err(Error::invalid("weights must be nonempty"));
        }
        if let Some(x) = r.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
            return Err(Error::invalid(format!("weight {x} outside (0,1)")));
        }
        Ok(Weights(r))
    }

    pub fn uniform(n: u32, r: f64) -> Result<Self> {
        Self::new(vec![r; n as usize])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: Letter) -> f64 {
        self.0[i as usize]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn ratio(&self, word: &[Letter]) -> f64 {
        word.iter().map(|&l| self.0[l as usize]).product()
    }

    pub fn r_min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn r_max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Whether every weight equals the first (within the boundary tolerance).
    pub fn is_uniform(&self) -> bool {
        let r = self.0[0];
        self.0.iter().all(|&x| (x - r).abs() <= REL_TOL * r)
    }
}

/// A finite antichain of words whose cylinders cover every infinite word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    alphabet: u32,
    words: Vec<Word>,
}

impl Section {
    pub fn alphabet(&self) -> u32 {
        self.alphabet
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, w: &[Letter]) -> bool {
        self.index_of(w).is_some()
    }

    pub fn index_of(&self, w: &[Letter]) -> Option<usize> {
        self.words.binary_search_by(|x| x.letters().cmp(w)).ok()
    }

    /// The section word that is a prefix of `w`, if any.
    pub fn prefix_of(&self, w: &[Letter]) -> Option<&Word> {
        (0..=w.len()).find_map(|n| self.index_of(&w[..n]).map(|i| &self.words[i]))
    }
}

/// Check the antichain and exact-cover conditions.
pub fn validate_section(alphabet: u32, candidate: &[Word]) -> Result<bool> {
    if alphabet == 0 {
        return Err(Error::invalid("alphabet must be nonempty"));
    }
    if let Some(l) = candidate.iter().flat_map(|w| w.iter()).find(|&&l| l >= alphabet) {
        return Err(Error::invalid(format!(
            "letter {l} outside alphabet of size {alphabet}"
        )));
    }
    let mut words: Vec<&Word> = candidate.iter().collect();
    words.sort();
    words.dedup();
    // In sorted order a word that is a prefix of another is a prefix of its successor.
    if words.windows(2).any(|p| p[0].is_prefix_of(p[1])) {
        return Ok(false);
    }
    fn covered(prefix: &mut Vec<Letter>, words: &[&Word], alphabet: u32) -> bool {
        match words {
            [] => false,
            [w] if w.letters() == &prefix[..] => true,
            _ => {
                let n = prefix.len();
                let mut rest = words;
                for a in 0..alphabet {
                    let cut = rest.partition_point(|w| w.len() > n && w[n] <= a);
                    let (head, tail) = rest.split_at(cut);
                    let head: Vec<&Word> = head.iter().copied().filter(|w| w[n] == a).collect();
                    prefix.push(a);
                    let ok = covered(prefix, &head, alphabet);
                    prefix.pop();
                    if !ok {
                        return false;
                    }
                    rest = tail;
                }
                true
            }
        }
    }
    Ok(covered(&mut Vec::new(), &words, alphabet))
}

/// Π_ρ for ρ in (0, r_min].
pub fn section_pi_rho(weights: &Weights, rho: f64, budget: usize) -> Result<Section> {
    if !(rho > 0.0 && le_tol(rho, weights.r_min())) {
        return Err(Error::invalid(format!(
            "rho = {rho} outside (0, r_min = {}]",
            weights.r_min()
        )));
    }
    pi_section(weights, rho, budget)
}

/// Π_t = { i : r_i ≤ t < r_{i⁻} } for any t > 0, with Π_t = {∅} when t ≥ 1.
pub fn pi_section(weights: &Weights, t: f64, budget: usize) -> Result<Section> {
    if t <= 0.0 || !t.is_finite() {
        return Err(Error::invalid(format!("section threshold {t} must be positive")));
    }
    let mut words = Vec::new();
    if le_tol(1.0, t) {
        words.push(Word::root());
    } else {
        let n = weights.len() as Letter;
        let mut stack = vec![(Vec::<Letter>::new(), 1.0f64)];
        let mut visited = 0usize;
        while let Some((w, r)) = stack.pop() {
            for a in (0..n).rev() {
                visited += 1;
                if visited > budget {
                    return Err(Error::ResourceLimit {
                        what: "section node budget".into(),
                        limit: budget,
                        depth: w.len() + 1,
                    });
                }
                let r2 = r * weights.get(a);
                let mut w2 = w.clone();
                w2.push(a);
                if le_tol(r2, t) {
                    words.push(Word(w2));
                } else {
                    stack.push((w2, r2));
                }
            }
        }
        words.sort();
    }
    Ok(Section {
        alphabet: weights.len() as u32,
        words,
    })
}

/// (n_ρ(i), a_ρ(i)): the section level containing `word` and r_i/ρ^n.
pub fn rho_index(weights: &Weights, rho: f64, word: &[Letter]) -> Result<(usize, f64)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho = {rho} outside (0,1)")));
    }
    if word.is_empty() {
        return Ok((0, 1.0));
    }
    let r = weights.ratio(word);
    let r_parent = weights.ratio(&word[..word.len() - 1]);
    let guess = (r.ln() / rho.ln()).floor().max(1.0) as i32;
    for n in (guess - 1).max(1)..=guess + 1 {
        let t = rho.powi(n);
        if le_tol(r, t) && !le_tol(r_parent, t) {
            return Ok((n as usize, r / t));
        }
    }
    Err(Error::invalid(format!(
        "word {} is not in any section Π_(ρ^n)",
        Word(word.to_vec())
    )))
}

/// The k-compressed tree over the alphabet Λ^k (big-endian blocks).
pub fn compress_k(tree: &FiniteTree, k: usize) -> Result<FiniteTree> {
    if k == 0 || !tree.depth.is_multiple_of(k) {
        return Err(Error::invalid(format!(
            "depth {} not divisible by k = {k}",
            tree.depth
        )));
    }
    let alphabet = (tree.alphabet as u64)
        .checked_pow(k as u32)
        .filter(|&a| a <= u32::MAX as u64)
        .ok_or_else(|| Error::invalid("compressed alphabet exceeds 32-bit letters"))?
        as u32;
    let depth = tree.depth / k;
    let mut levels: Vec<Vec<Rec>> = Vec::with_capacity(depth + 1);
    levels.push(vec![Rec {
        parent: NO_PARENT,
        letter: 0,
        start: 0,
        end: 0,
    }]);
    for j in 1..=depth {
        let recs: Vec<Rec> = tree
            .level(j * k)
            .map(|id| {
                let mut cur = id;
                let mut block = vec![0; k];
                for slot in block.iter_mut().rev() {
                    *slot = tree.letter(cur);
                    cur = tree.parent(cur).expect("deep node has parent");
                }
                Rec {
                    parent: cur.index as u32,
                    letter: encode_block(&block, tree.alphabet),
                    start: 0,
                    end: 0,
                }
            })
            .collect();
        let prev = &mut levels[j - 1];
        for (i, r) in recs.iter().enumerate() {
            let p = &mut prev[r.parent as usize];
            if p.start == 0 && p.end == 0 {
                p.start = i as u32;
            }
            p.end = i as u32 + 1;
        }
        levels.push(recs);
    }
    Ok(FiniteTree {
        alphabet,
        depth,
        levels,
    })
}

/// A node of a [`StarTree`]; `suffix` is the word relative to its parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarNode {
    pub suffix: Word,
    pub parent: Option<usize>,
    pub height: usize,
    pub children: Vec<usize>,
}

/// A tree whose nodes are words of varying length organised by height.
/// Equality ignores node numbering.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StarTree {
    alphabet: u32,
    nodes: Vec<StarNode>,
}

impl PartialEq for StarTree {
    fn eq(&self, other: &Self) -> bool {
        let key = |t: &StarTree| {
            let mut v: Vec<(Word, usize)> =
                (0..t.len()).map(|i| (t.word(i), t.nodes[i].height)).collect();
            v.sort();
            v
        };
        self.alphabet == other.alphabet && self.len() == other.len() && key(self) == key(other)
    }
}

impl StarTree {
    pub fn new(alphabet: u32) -> Self {
        StarTree {
            alphabet,
            nodes: vec![StarNode {
                suffix: Word::root(),
                parent: None,
                height: 0,
                children: Vec::new(),
            }],
        }
    }

    pub fn alphabet(&self) -> u32 {
        self.alphabet
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: usize) -> &StarNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[StarNode] {
        &self.nodes
    }

    /// Append a child with the given relative suffix; children are kept sorted.
    pub fn add_child(&mut self, parent: usize, suffix: Word) -> usize {
        let id = self.nodes.len();
        let height = self.nodes[parent].height + 1;
        self.nodes.push(StarNode {
            suffix,
            parent: Some(parent),
            height,
            children: Vec::new(),
        });
        let nodes = &self.nodes;
        let kids = &nodes[parent].children;
        let pos = kids.partition_point(|&c| nodes[c].suffix < nodes[id].suffix);
        self.nodes[parent].children.insert(pos, id);
        id
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn height(&self) -> usize {
        self.nodes.iter().map(|n| n.height).max().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> Word {
        let mut parts = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            parts.push(&self.nodes[c].suffix);
            cur = self.nodes[c].parent;
        }
        Word(parts.iter().rev().flat_map(|w| w.iter().copied()).collect())
    }

    pub fn at_height(&self, h: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].height == h).collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].children.is_empty())
            .collect()
    }

    pub fn find(&self, word: &[Letter]) -> Option<usize> {
        let mut cur = 0;
        let mut pos = 0;
        while pos < word.len() {
            let rest = &word[pos..];
            let next = self.nodes[cur]
                .children
                .iter()
                .copied()
                .find(|&c| self.nodes[c].suffix.is_prefix_of(rest))?;
            pos += self.nodes[next].suffix.len();
            cur = next;
        }
        Some(cur)
    }

    /// Full words of all nodes, sorted.
    pub fn words(&self) -> Vec<Word> {
        let mut w: Vec<Word> = (0..self.nodes.len()).map(|i| self.word(i)).collect();
        w.sort();
        w
    }

    /// Words grouped by height: entry h lists the full words of height h.
    pub fn levels(&self) -> Vec<Vec<Word>> {
        let mut out = vec![Vec::new(); self.height() + 1];
        for i in 0..self.nodes.len() {
            out[self.nodes[i].height].push(self.word(i));
        }
        for l in &mut out {
            l.sort();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# gwfract-startree alphabet={}\n", self.alphabet);
        for w in self.words() {
            s.push_str(&w.to_string());
            s.push('\n');
        }
        s
    }

    /// Rebuild from the text form; each node's parent is its longest proper
    /// prefix present in the file.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let (alphabet, _) = parse_header(lines.next().unwrap_or_default(), "gwfract-startree")?;
        let body: Vec<&str> = lines.collect();
        let words = parse_word_lines(&body)?;
        if words.first() != Some(&Word::root()) {
            return Err(Error::invalid("star tree must contain the root"));
        }
        let mut tree = StarTree::new(alphabet);
        let mut ids: Vec<(Word, usize)> = vec![(Word::root(), 0)];
        for w in words.into_iter().skip(1) {
            // Lexicographic order visits a node before its descendants, so the
            // parent is the nearest stack entry that is a prefix.
            while !ids.last().expect("root stays").0.is_prefix_of(&w) {
                ids.pop();
            }
            let (pw, pid) = ids.last().expect("root stays").clone();
            let id = tree.add_child(pid, Word(w[pw.len()..].to_vec()));
            ids.push((w, id));
        }
        Ok(tree)
    }
}

/// Compress `tree` along the sections Π_{ρ^n}. Heights run up to `levels`
/// when given, otherwise up to the largest N for which Π_{ρ^N} lies within
/// the sampled depth.
pub fn compress_along_pi_rho(
    tree: &FiniteTree,
    weights: &Weights,
    rho: f64,
    levels: Option<usize>,
) -> Result<StarTree> {
    if weights.len() != tree.alphabet as usize {
        return Err(Error::invalid("weights and tree alphabet differ in size"));
    }
    if !(rho > 0.0 && le_tol(rho, weights.r_min())) {
        return Err(Error::invalid(format!(
            "rho = {rho} outside (0, r_min = {}]",
            weights.r_min()
        )));
    }
    let usable = max_section_height(weights, rho, tree.depth);
    let max_h = match levels {
        Some(n) if n > usable => {
            return Err(Error::invalid(format!(
                "tree depth {} supports at most {usable} section levels, {n} requested",
                tree.depth
            )))
        }
        Some(n) => n,
        None => usable,
    };
    let mut out = StarTree::new(tree.alphabet);
    let mut queue = std::collections::VecDeque::from([(0usize, tree.root(), 1.0f64)]);
    while let Some((sid, tid, r)) = queue.pop_front() {
        let h = out.node(sid).height;
        if h >= max_h {
            continue;
        }
        let t = rho.powi(h as i32 + 1);
        let mut stack = vec![(tid, r, Vec::<Letter>::new())];
        let mut found = Vec::new();
        while let Some((id, rr, suf)) = stack.pop() {
            for c in tree.children(id) {
                let r2 = rr * weights.get(tree.letter(c));
                let mut s2 = suf.clone();
                s2.push(tree.letter(c));
                if le_tol(r2, t) {
                    found.push((c, r2, s2));
                } else {
                    stack.push((c, r2, s2));
                }
            }
        }
        found.sort_by(|a, b| a.2.cmp(&b.2));
        for (c, r2, s2) in found {
            let nid = out.add_child(sid, Word(s2));
            queue.push_back((nid, c, r2));
        }
    }
    Ok(out)
}

/// Largest N with Π_{ρ^N} inside depth `depth`: every word of Π_{ρ^N} has
/// length ≤ D iff r_max^D ≤ ρ^N.
pub fn max_section_height(weights: &Weights, rho: f64, depth: usize) -> usize {
    let r_max_d = weights.r_max().powi(depth as i32);
    let mut h = 0;
    while le_tol(r_max_d, rho.powi(h + 1)) {
        h += 1;
    }
    h as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: &[u32]) -> Word {
        Word(v.to_vec())
    }

    #[test]
    fn section_examples() {
        assert!(validate_section(2, &[w(&[0]), w(&[1])]).unwrap());
        assert!(validate_section(2, &[w(&[0]), w(&[1, 0]), w(&[1, 1])]).unwrap());
        assert!(!validate_section(2, &[w(&[0]), w(&[1, 0])]).unwrap());
        assert!(!validate_section(2, &[w(&[0]), w(&[0, 1]), w(&[1])]).unwrap());
        assert!(validate_section(2, &[w(&[])]).unwrap());
        assert!(validate_section(2, &[w(&[2])]).is_err());
    }

    #[test]
    fn pi_rho_examples() {
        let third = Weights::uniform(9, 1.0 / 3.0).unwrap();
        let s = section_pi_rho(&third, 1.0 / 9.0, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(s.len(), 81);
        assert!(s.words().iter().all(|x| x.len() == 2));

        let mixed = Weights::new(vec![0.5, 0.25]).unwrap();
        let s = section_pi_rho(&mixed, 0.25, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(s.words(), &[w(&[0, 0]), w(&[0, 1]), w(&[1])]);
        assert!(section_pi_rho(&mixed, 0.3, DEFAULT_NODE_BUDGET).is_err());
        assert!(section_pi_rho(&mixed, 0.0, DEFAULT_NODE_BUDGET).is_err());
    }

    #[test]
    fn pi_rho_budget() {
        let third = Weights::uniform(9, 1.0 / 3.0).unwrap();
        let e = section_pi_rho(&third, 3f64.powi(-6), 1000).unwrap_err();
        assert!(matches!(e, Error::ResourceLimit { .. }));
    }

    #[test]
    fn rho_index_examples() {
        let third = Weights::uniform(2, 1.0 / 3.0).unwrap();
        assert_eq!(rho_index(&third, 1.0 / 3.0, &[]).unwrap(), (0, 1.0));
        let (n, a) = rho_index(&third, 1.0 / 3.0, &[0, 1, 1, 0, 1]).unwrap();
        assert_eq!(n, 5);
        assert!((a - 1.0).abs() < 1e-9);
        let half = Weights::uniform(2, 0.5).unwrap();
        assert!(rho_index(&half, 0.125, &[0, 1]).is_err());
    }

    #[test]
    fn compress_full_binary() {
        let t = FiniteTree::full(2, 4).unwrap();
        let c = compress_k(&t, 2).unwrap();
        assert_eq!(c, FiniteTree::full(4, 2).unwrap());
        assert_eq!(compress_k(&t, 1).unwrap(), t);
        assert!(compress_k(&t, 3).is_err());
    }

    #[test]
    fn tree_roundtrip_and_queries() {
        let words = [w(&[]), w(&[0]), w(&[2]), w(&[2, 1]), w(&[2, 10])];
        let t = FiniteTree::from_words(11, 3, words.clone()).unwrap();
        assert_eq!(t.level_sizes(), vec![1, 2, 2, 0]);
        assert_eq!(t.extinct_at(), Some(3));
        assert_eq!(t.words(), words.to_vec());
        let text = t.to_text();
        assert_eq!(FiniteTree::from_text(&text).unwrap().to_text(), text);
        let id = t.find(&[2, 10]).unwrap();
        assert_eq!(t.word(id), w(&[2, 10]));
        assert!(t.find(&[1]).is_none());
        let sub = t.subtree(t.find(&[2]).unwrap());
        assert_eq!(sub.words(), vec![w(&[]), w(&[1]), w(&[10])]);
        assert!(FiniteTree::from_words(3, 2, [w(&[]), w(&[0, 1])]).is_err());
    }

    #[test]
    fn star_tree_matches_compress_k() {
        let t = FiniteTree::full(3, 4).unwrap();
        let wts = Weights::uniform(3, 1.0 / 3.0).unwrap();
        let s = compress_along_pi_rho(&t, &wts, 1.0 / 9.0, None).unwrap();
        assert_eq!(s.height(), 2);
        assert_eq!(s.len(), 1 + 9 + 81);
        let text = s.to_text();
        assert_eq!(StarTree::from_text(&text).unwrap(), s);
    }

    #[test]
    fn star_heights_match_rho_index() {
        let t = FiniteTree::full(2, 7).unwrap();
        let wts = Weights::new(vec![0.5, 0.25]).unwrap();
        let rho = 0.25;
        let s = compress_along_pi_rho(&t, &wts, rho, None).unwrap();
        assert!(s.height() >= 3);
        for id in 0..s.len() {
            let (n, _) = rho_index(&wts, rho, &s.word(id)).unwrap();
            assert_eq!(n, s.node(id).height);
        }
    }
}
