//! Similarity IFS geometry: coding maps, rendering, the Moran exponent,
//! widths and certified diffuseness constants, empirical diffuseness and
//! Ahlfors checks, the OSC overlap count, box dimension and minisets.
//!
//! Points live in ℝ³; planar systems use z = 0 and in-plane orthogonal parts.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branching::OffspringDistribution;
use crate::error::{Error, Result};
use crate::rng::trial_rng;
use crate::symbolic::{pi_section, FiniteTree, Letter, StarTree, Weights, Word, DEFAULT_NODE_BUDGET};

pub type Point = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-10;

/// x ↦ r·O·x + t.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub ratio: f64,
    pub orth: Matrix3<f64>,
    pub translation: Point,
}

impl SimilarityMap {
    pub fn new(ratio: f64, orth: Matrix3<f64>, translation: Point) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid(format!("contraction ratio {ratio} outside (0,1)")));
        }
        let dev = (orth.transpose() * orth - Matrix3::identity()).abs().max();
        if dev > ORTHO_TOL {
            return Err(Error::invalid(format!("orthogonal part deviates by {dev:e}")));
        }
        Ok(SimilarityMap { ratio, orth, translation })
    }

    pub fn identity() -> Self {
        SimilarityMap { ratio: 1.0, orth: Matrix3::identity(), translation: Point::zeros() }
    }

    /// Planar similarity with rotation angle `angle`.
    pub fn planar(ratio: f64, angle: f64, t: [f64; 2]) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let orth = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self::new(ratio, orth, Point::new(t[0], t[1], 0.0))
    }

    pub fn apply(&self, x: &Point) -> Point {
        self.ratio * (self.orth * x) + self.translation
    }

    pub fn apply_inverse(&self, y: &Point) -> Point {
        self.orth.transpose() * (y - self.translation) / self.ratio
    }

    /// self ∘ other.
    pub fn compose(&self, other: &SimilarityMap) -> SimilarityMap {
        SimilarityMap {
            ratio: self.ratio * other.ratio,
            orth: self.orth * other.orth,
            translation: self.ratio * (self.orth * other.translation) + self.translation,
        }
    }

    pub fn fixed_point(&self) -> Point {
        let a = Matrix3::identity() - self.ratio * self.orth;
        a.lu().solve(&self.translation).unwrap_or_else(Point::zeros)
    }
}

/// An open set for the open set condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OscSet {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl OscSet {
    /// Distance from `x` to the closure of the set.
    fn distance(&self, x: &Point) -> f64 {
        match self {
            OscSet::Box { lo, hi } => {
                let mut s = 0.0;
                for j in 0..lo.len() {
                    let e = (lo[j] - x[j]).max(x[j] - hi[j]).max(0.0);
                    s += e * e;
                }
                s.sqrt()
            }
            OscSet::Ball { center, radius } => {
                ((x - to_point(center)).norm() - radius).max(0.0)
            }
        }
    }

    fn corners(&self, d: usize) -> Vec<Point> {
        match self {
            OscSet::Box { lo, hi } => (0..1usize << d)
                .map(|m| {
                    let mut p = Point::zeros();
                    for j in 0..d {
                        p[j] = if m >> j & 1 == 1 { hi[j] } else { lo[j] };
                    }
                    p
                })
                .collect(),
            OscSet::Ball { .. } => Vec::new(),
        }
    }
}

fn to_point(v: &[f64]) -> Point {
    Point::new(v[0], v.get(1).copied().unwrap_or(0.0), v.get(2).copied().unwrap_or(0.0))
}

/// A finite family of contracting similarities of ℝ^d, d ∈ {2, 3}.
#[derive(Clone, Debug)]
pub struct SimilarityIfs {
    pub d: usize,
    pub maps: Vec<SimilarityMap>,
    pub osc: Option<OscSet>,
}

#[derive(Serialize, Deserialize)]
struct MapSpec {
    r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    angle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<Vec<f64>>,
    t: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct IfsSpec {
    d: usize,
    maps: Vec<MapSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    osc: Option<OscSet>,
}

impl SimilarityIfs {
    pub fn new(d: usize, maps: Vec<SimilarityMap>, osc: Option<OscSet>) -> Result<Self> {
        if !(d == 2 || d == 3) {
            return Err(Error::invalid(format!("dimension {d} unsupported (2 or 3)")));
        }
        if maps.is_empty() {
            return Err(Error::invalid("an IFS needs at least one map"));
        }
        if let Some(o) = &osc {
            let len_ok = match o {
                OscSet::Box { lo, hi } => {
                    lo.len() == d && hi.len() == d && lo.iter().zip(hi).all(|(a, b)| a < b)
                }
                OscSet::Ball { center, radius } => center.len() == d && *radius > 0.0,
            };
            if !len_ok {
                return Err(Error::invalid("malformed OSC set"));
            }
        }
        if d == 2 {
            for m in &maps {
                if m.translation.z != 0.0 || m.orth[(2, 2)] != 1.0 {
                    return Err(Error::invalid("planar maps must fix the z axis"));
                }
            }
        }
        Ok(SimilarityIfs { d, maps, osc })
    }

    /// The b-adic grid IFS on [0,1]^d. Letter l codes the digit vector with
    /// the first coordinate most significant.
    pub fn percolation(b: u32, d: usize) -> Result<Self> {
        if b < 2 {
            return Err(Error::invalid("grid base must be at least 2"));
        }
        let n = b.pow(d as u32);
        let r = 1.0 / f64::from(b);
        let maps = (0..n)
            .map(|l| {
                let digits = crate::symbolic::decode_block(l, b, d);
                let mut t = Point::zeros();
                for (j, &x) in digits.iter().enumerate() {
                    t[j] = f64::from(x) * r;
                }
                SimilarityMap::new(r, Matrix3::identity(), t)
            })
            .collect::<Result<Vec<_>>>()?;
        let osc = OscSet::Box { lo: vec![0.0; d], hi: vec![1.0; d] };
        Self::new(d, maps, Some(osc))
    }

    /// The three-map Sierpinski gasket with ratio 1/2.
    pub fn sierpinski() -> Self {
        let h = 3f64.sqrt() / 2.0;
        let maps = [[0.0, 0.0], [0.5, 0.0], [0.25, h / 2.0]]
            .iter()
            .map(|&t| SimilarityMap::planar(0.5, 0.0, t).expect("valid map"))
            .collect();
        let osc = OscSet::Box { lo: vec![0.0, 0.0], hi: vec![1.0, h] };
        SimilarityIfs::new(2, maps, Some(osc)).expect("valid IFS")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: IfsSpec = serde_json::from_str(s)?;
        let d = spec.d;
        let maps = spec
            .maps
            .iter()
            .map(|m| {
                if m.t.len() != d {
                    return Err(Error::invalid("translation length must equal d"));
                }
                let t = to_point(&m.t);
                match (d, &m.rotation, m.angle) {
                    (2, None, a) => SimilarityMap::planar(m.r, a.unwrap_or(0.0), [t.x, t.y]),
                    (3, Some(rot), None) if rot.len() == 9 => {
                        SimilarityMap::new(m.r, Matrix3::from_row_slice(rot), t)
                    }
                    (3, None, None) => SimilarityMap::new(m.r, Matrix3::identity(), t),
                    _ => Err(Error::invalid("use `angle` for d=2 and a 9-entry `rotation` for d=3")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(d, maps, spec.osc)
    }

    pub fn to_json(&self) -> String {
        let maps = self
            .maps
            .iter()
            .map(|m| {
                let t = (0..self.d).map(|j| m.translation[j]).collect();
                if self.d == 2 {
                    MapSpec { r: m.ratio, angle: Some(m.orth[(1, 0)].atan2(m.orth[(0, 0)])), rotation: None, t }
                } else {
                    let rot = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| m.orth[(i, j)]).collect();
                    MapSpec { r: m.ratio, angle: None, rotation: Some(rot), t }
                }
            })
            .collect();
        serde_json::to_string(&IfsSpec { d: self.d, maps, osc: self.osc.clone() }).expect("serializable")
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn weights(&self) -> Weights {
        Weights::new(self.maps.iter().map(|m| m.ratio).collect()).expect("ratios in (0,1)")
    }

    pub fn r_max(&self) -> f64 {
        self.maps.iter().map(|m| m.ratio).fold(0.0, f64::max)
    }

    pub fn word_map(&self, word: &[Letter]) -> Result<SimilarityMap> {
        let mut m = SimilarityMap::identity();
        for &l in word {
            let f = self
                .maps
                .get(l as usize)
                .ok_or_else(|| Error::invalid(format!("letter {l} out of range")))?;
            m = m.compose(f);
        }
        Ok(m)
    }

    /// Check φ_i(U) ⊆ Ū and pairwise disjointness of the open images.
    pub fn check_osc(&self) -> Result<bool> {
        let Some(u) = &self.osc else {
            return Err(Error::Capability("IFS has no OSC set".into()));
        };
        match u {
            OscSet::Ball { center, radius } => {
                let c = to_point(center);
                let imgs: Vec<(Point, f64)> =
                    self.maps.iter().map(|m| (m.apply(&c), m.ratio * radius)).collect();
                let inside = imgs.iter().all(|(p, r)| (p - c).norm() + r <= radius * (1.0 + 1e-12));
                let disjoint = (0..imgs.len()).all(|i| {
                    (i + 1..imgs.len())
                        .all(|j| (imgs[i].0 - imgs[j].0).norm() >= (imgs[i].1 + imgs[j].1) * (1.0 - 1e-12))
                });
                Ok(inside && disjoint)
            }
            OscSet::Box { .. } => {
                let corners = u.corners(self.d);
                let images: Vec<Vec<Point>> = self
                    .maps
                    .iter()
                    .map(|m| corners.iter().map(|c| m.apply(c)).collect())
                    .collect();
                let scale = corners.iter().map(|c| c.norm()).fold(1.0, f64::max);
                let inside = images
                    .iter()
                    .all(|img| img.iter().all(|p| u.distance(p) <= 1e-12 * scale));
                let axes: Vec<Vec<Point>> = self
                    .maps
                    .iter()
                    .map(|m| (0..self.d).map(|j| m.orth.column(j).into_owned()).collect())
                    .collect();
                let separated = |i: usize, j: usize| {
                    let mut cand: Vec<Point> = axes[i].iter().chain(&axes[j]).cloned().collect();
                    if self.d == 3 {
                        for a in &axes[i] {
                            for b in &axes[j] {
                                let c = a.cross(b);
                                if c.norm() > 1e-9 {
                                    cand.push(c.normalize());
                                }
                            }
                        }
                    }
                    cand.iter().any(|ax| {
                        let (l1, h1) = proj_range(&images[i], ax);
                        let (l2, h2) = proj_range(&images[j], ax);
                        h1 <= l2 + 1e-12 * scale || h2 <= l1 + 1e-12 * scale
                    })
                };
                let disjoint =
                    (0..images.len()).all(|i| (i + 1..images.len()).all(|j| separated(i, j)));
                Ok(inside && disjoint)
            }
        }
    }

    /// Centroid of the self-similar measure with probabilities r_i^s, s the
    /// similarity dimension.
    pub fn centroid(&self) -> Point {
        let r: Vec<f64> = self.maps.iter().map(|m| m.ratio).collect();
        let s = similarity_dimension(&r);
        let p: Vec<f64> = r.iter().map(|x| x.powf(s)).collect();
        let total: f64 = p.iter().sum();
        let mut a = Matrix3::identity();
        let mut rhs = Point::zeros();
        for (m, w) in self.maps.iter().zip(&p) {
            let w = w / total;
            a -= w * m.ratio * m.orth;
            rhs += w * m.translation;
        }
        a.lu().solve(&rhs).unwrap_or_else(|| self.maps[0].fixed_point())
    }

    /// A ball (center, radius) certified to contain the attractor.
    pub fn bounding_ball(&self) -> (Point, f64) {
        let c = self.centroid();
        let r = self
            .maps
            .iter()
            .map(|m| (m.apply(&c) - c).norm() / (1.0 - m.ratio))
            .fold(0.0, f64::max);
        let mut best = (c, r);
        if let Some(OscSet::Box { lo, hi }) = &self.osc {
            let (lo, hi) = (to_point(lo), to_point(hi));
            let rb = (hi - lo).norm() / 2.0;
            if rb < best.1 && self.check_osc().unwrap_or(false) {
                best = ((lo + hi) / 2.0, rb);
            }
        }
        best
    }

    /// Certified upper bound Δ̂ on diam(K).
    pub fn diameter_bound(&self) -> f64 {
        2.0 * self.bounding_ball().1
    }

    /// Vertices of a polytope containing K: the hull of the fixed points if
    /// it is invariant, else the OSC box, else a box around the bounding ball.
    pub fn hull_polytope(&self) -> Vec<Point> {
        let fixed: Vec<Point> = self.maps.iter().map(|m| m.fixed_point()).collect();
        if self.d == 2 {
            let hull = convex_hull_2d(&fixed);
            if hull.len() >= 3 {
                let invariant = self.maps.iter().all(|m| {
                    hull.iter().all(|v| point_in_convex_polygon(&hull, &m.apply(v), 1e-12))
                });
                if invariant {
                    return hull;
                }
            }
        }
        if let Some(o @ OscSet::Box { .. }) = &self.osc {
            if self.check_osc().unwrap_or(false) {
                return o.corners(self.d);
            }
        }
        let (c, r) = self.bounding_ball();
        let lo: Vec<f64> = (0..self.d).map(|j| c[j] - r).collect();
        let hi: Vec<f64> = (0..self.d).map(|j| c[j] + r).collect();
        OscSet::Box { lo, hi }.corners(self.d)
    }
}

fn proj_range(pts: &[Point], u: &Point) -> (f64, f64) {
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let x = u.dot(p);
        (lo.min(x), hi.max(x))
    })
}

fn similarity_dimension(r: &[f64]) -> f64 {
    let f = |s: f64| r.iter().map(|x| x.powf(s)).sum::<f64>() - 1.0;
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solve E Σ_{i∈W} r_i^δ = 1 by bisection.
pub fn moran_exponent(offspring: &OffspringDistribution, weights: &Weights, tol: f64) -> Result<f64> {
    let p = offspring.inclusion_probs();
    if p.len() != weights.len() {
        return Err(Error::invalid("weights and offspring alphabet differ in size"));
    }
    let m: f64 = p.iter().sum();
    if m <= 1.0 {
        return Err(Error::invalid(format!("mean offspring {m} ≤ 1: not supercritical")));
    }
    let f = |delta: f64| -> f64 {
        p.iter().zip(weights.as_slice()).map(|(pi, r)| pi * r.powf(delta)).sum::<f64>() - 1.0
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..400 {
        mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() <= tol * 1e-3 || hi - lo < 1e-15 {
            break;
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if f(mid).abs() > tol {
        return Err(Error::Inconclusive(format!("residual {:e} above tolerance", f(mid))));
    }
    Ok(mid)
}

/// Points with a common resolution ε: each point stands for a set of
/// diameter at most ε that contains it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub d: usize,
    pub points: Vec<Point>,
    pub eps: f64,
}

impl PointCloud {
    pub fn new(d: usize, points: Vec<Point>, eps: f64) -> Self {
        PointCloud { d, points, eps }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bbox(&self) -> Option<(Point, Point)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }

    pub fn diameter_estimate(&self) -> f64 {
        self.bbox().map(|(lo, hi)| (hi - lo).norm()).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.d == 3 { "x,y,z\n" } else { "x,y\n" });
        for p in &self.points {
            if self.d == 3 {
                s.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
            } else {
                s.push_str(&format!("{},{}\n", p.x, p.y));
            }
        }
        s
    }

    pub fn from_csv(text: &str, eps: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty CSV"))?;
        let d = header.split(',').count();
        if !(d == 2 || d == 3) {
            return Err(Error::invalid("CSV must have 2 or 3 columns"));
        }
        let points = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let v: Vec<f64> = l
                    .split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number in {l:?}"))))
                    .collect::<Result<_>>()?;
                if v.len() != d {
                    return Err(Error::invalid(format!("row {l:?} has the wrong width")));
                }
                Ok(to_point(&v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PointCloud { d, points, eps })
    }

    /// Binary PGM raster of the (x,y) projection; occupied pixels are black.
    /// Each point paints the square of half-side `half` around it, or a
    /// single pixel when `half` is 0.
    pub fn to_pgm(&self, lo: [f64; 2], hi: [f64; 2], width: usize, height: usize, half: f64) -> Vec<u8> {
        let mut px = vec![255u8; width * height];
        let (sx, sy) = (width as f64 / (hi[0] - lo[0]), height as f64 / (hi[1] - lo[1]));
        let span = |c: f64, lo: f64, s: f64, n: usize| -> Option<(usize, usize)> {
            let a = (c - half - lo) * s;
            let b = (c + half - lo) * s;
            if b < 0.0 || a > n as f64 {
                return None;
            }
            let first = (a + 1e-9).floor().max(0.0) as usize;
            let last = ((b - 1e-9).ceil() as usize).saturating_sub(1).max(first);
            Some((first.min(n - 1), last.min(n - 1)))
        };
        for p in &self.points {
            let (Some((i0, i1)), Some((j0, j1))) = (span(p.x, lo[0], sx, width), span(p.y, lo[1], sy, height)) else {
                continue;
            };
            for j in j0..=j1 {
                let row = (height - 1 - j) * width;
                px[row + i0..=row + i1].fill(0);
            }
        }
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        out.extend(px);
        out
    }
}

/// Render one point φ_w(base) per word; ε = Δ̂ · max ratio.
pub fn render_words<'a>(
    ifs: &SimilarityIfs,
    words: impl IntoIterator<Item = &'a [Letter]>,
    base: Option<Point>,
) -> Result<PointCloud> {
    let base = base.unwrap_or_else(|| ifs.centroid());
    let mut points = Vec::new();
    let mut rmax: f64 = 0.0;
    for w in words {
        let m = ifs.word_map(w)?;
        rmax = rmax.max(m.ratio);
        points.push(m.apply(&base));
    }
    Ok(PointCloud { d: ifs.d, points, eps: ifs.diameter_bound() * rmax })
}

/// Render the deepest level of a tree. An extinct tree gives an empty cloud.
pub fn render_tree(ifs: &SimilarityIfs, tree: &FiniteTree, base: Option<Point>) -> Result<PointCloud> {
    if tree.alphabet() as usize != ifs.len() {
        return Err(Error::invalid("tree alphabet and IFS size differ"));
    }
    let base = base.unwrap_or_else(|| ifs.centroid());
    let mut maps = vec![SimilarityMap::identity()];
    for n in 1..=tree.depth() {
        maps = tree
            .level(n)
            .map(|id| {
                let parent = tree.parent(id).expect("non-root").index;
                maps[parent].compose(&ifs.maps[tree.letter(id) as usize])
            })
            .collect();
    }
    let rmax = maps.iter().map(|m| m.ratio).fold(0.0, f64::max);
    Ok(PointCloud {
        d: ifs.d,
        points: maps.iter().map(|m| m.apply(&base)).collect(),
        eps: ifs.diameter_bound() * rmax,
    })
}

pub fn render_full(ifs: &SimilarityIfs, depth: usize, base: Option<Point>) -> Result<PointCloud> {
    let tree = FiniteTree::full(ifs.len() as u32, depth)?;
    render_tree(ifs, &tree, base)
}

/// Render the leaves of a *-tree at its maximal height, after `prefix`.
pub fn render_star(
    ifs: &SimilarityIfs,
    star: &StarTree,
    prefix: &SimilarityMap,
    base: Option<Point>,
) -> Result<PointCloud> {
    let base = base.unwrap_or_else(|| ifs.centroid());
    let maps = star_node_maps(ifs, star, prefix)?;
    let top = star.at_height(star.height());
    let rmax = top.iter().map(|&i| maps[i].ratio).fold(0.0, f64::max);
    Ok(PointCloud {
        d: ifs.d,
        points: top.iter().map(|&i| maps[i].apply(&base)).collect(),
        eps: ifs.diameter_bound() * rmax,
    })
}

/// prefix ∘ φ_w for every node w of a *-tree, indexed by node id.
pub fn star_node_maps(ifs: &SimilarityIfs, star: &StarTree, prefix: &SimilarityMap) -> Result<Vec<SimilarityMap>> {
    let mut maps = vec![SimilarityMap::identity(); star.len()];
    maps[star.root()] = prefix.clone();
    let mut stack = vec![star.root()];
    while let Some(id) = stack.pop() {
        for &c in star.children(id) {
            maps[c] = maps[id].compose(&ifs.word_map(&star.node(c).suffix)?);
            stack.push(c);
        }
    }
    Ok(maps)
}

/// An affine hyperplane {x : u·x = b} with unit normal.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hyperplane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Hyperplane {
    pub fn new(normal: Point, offset: f64) -> Self {
        let n = normal.norm();
        Hyperplane { normal: [normal.x / n, normal.y / n, normal.z / n], offset: offset / n }
    }

    pub fn unit_normal(&self) -> Point {
        Point::new(self.normal[0], self.normal[1], self.normal[2])
    }

    pub fn distance(&self, x: &Point) -> f64 {
        (self.unit_normal().dot(x) - self.offset).abs()
    }
}

/// Default direction budget for hyperplane searches.
pub const DEFAULT_DIRECTIONS: usize = 2000;
/// Coarse budget used inside extraction.
pub const COARSE_DIRECTIONS: usize = 200;

/// Directions u (one per ±u pair) and their covering angle.
fn direction_grid(d: usize, n: usize) -> (Vec<Point>, f64) {
    type Directions = HashMap<(usize, usize), (Vec<Point>, f64)>;
    static CACHE: OnceLock<Mutex<Directions>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("cache lock").get(&(d, n)) {
        return v.clone();
    }
    let out = if d == 2 {
        let dirs = (0..n)
            .map(|j| {
                let t = PI * j as f64 / n as f64;
                Point::new(t.cos(), t.sin(), 0.0)
            })
            .collect();
        (dirs, PI / (2.0 * n as f64))
    } else {
        let golden = PI * (3.0 - 5f64.sqrt());
        let dirs: Vec<Point> = (0..n)
            .map(|j| {
                let z = (j as f64 + 0.5) / n as f64;
                let rad = (1.0 - z * z).sqrt();
                let phi = golden * j as f64;
                Point::new(rad * phi.cos(), rad * phi.sin(), z)
            })
            .collect();
        let mut rng = trial_rng(0x6469_7273, n as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..20_000 {
            let v = loop {
                let v = Point::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>(),
                );
                let n2 = v.norm_squared();
                if n2 > 1e-6 && n2 <= 1.0 {
                    break v / n2.sqrt();
                }
            };
            let best = dirs.iter().map(|u| u.dot(&v).abs()).fold(0.0, f64::max).min(1.0);
            worst = worst.max(best.acos());
        }
        (dirs, worst * 1.25)
    };
    cache.lock().expect("cache lock").insert((d, n), out.clone());
    out
}

fn spherical(theta: f64, phi: f64) -> Point {
    Point::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc < fd { (c, fc) } else { (d, fd) }
}

/// Result of minimizing a direction objective.
#[derive(Clone, Debug)]
struct DirMin {
    grid_min: f64,
    value: f64,
    dir: Point,
    covering: f64,
}

/// Minimize f over unit directions: grid scan, then local golden-section
/// refinement around the best grid points.
fn minimize_over_directions(d: usize, n: usize, f: &(dyn Fn(&Point) -> f64 + Sync)) -> DirMin {
    let (dirs, covering) = direction_grid(d, n);
    let vals: Vec<f64> = dirs.par_iter().map(f).collect();
    let mut order: Vec<usize> = (0..dirs.len()).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let grid_min = vals[order[0]];
    let starts = &order[..order.len().min(8)];
    let refined: Vec<(f64, Point)> = starts
        .par_iter()
        .map(|&j| {
            let u = dirs[j];
            if d == 2 {
                let t0 = u.y.atan2(u.x);
                let h = 2.0 * covering;
                let (t, v) = golden_min(|t| f(&Point::new(t.cos(), t.sin(), 0.0)), t0 - h, t0 + h, 40);
                (v, Point::new(t.cos(), t.sin(), 0.0))
            } else {
                let mut th = u.z.clamp(-1.0, 1.0).acos();
                let mut ph = u.y.atan2(u.x);
                let mut h = 2.0 * covering;
                let mut best = f(&u);
                for _ in 0..4 {
                    let (t, v) = golden_min(|t| f(&spherical(t, ph)), th - h, th + h, 30);
                    if v < best {
                        best = v;
                        th = t;
                    }
                    let (p, v) = golden_min(|p| f(&spherical(th, p)), ph - h, ph + h, 30);
                    if v < best {
                        best = v;
                        ph = p;
                    }
                    h *= 0.5;
                }
                (best, spherical(th, ph))
            }
        })
        .collect();
    let (value, dir) = refined
        .into_iter()
        .fold((grid_min, dirs[order[0]]), |acc, x| if x.0 < acc.0 { x } else { acc });
    DirMin { grid_min, value, dir, covering }
}

/// Width of a cloud and the witness hyperplane.
#[derive(Clone, Debug, Serialize)]
pub struct Width {
    pub width: f64,
    pub witness: Hyperplane,
    /// Bound on |reported − true| from the search (0 for the exact planar route).
    pub tolerance: f64,
}

fn half_range(pts: &[Point], u: &Point) -> (f64, f64) {
    let (lo, hi) = proj_range(pts, u);
    ((hi - lo) / 2.0, (hi + lo) / 2.0)
}

/// min over hyperplanes of the max point distance. Planar clouds use the
/// exact hull-edge route; spatial clouds use the direction search.
pub fn width(cloud: &PointCloud) -> Width {
    width_of(cloud.d, &cloud.points)
}

pub fn width_of(d: usize, pts: &[Point]) -> Width {
    if pts.len() <= 1 {
        let b = pts.first().map(|p| p.x).unwrap_or(0.0);
        return Width { width: 0.0, witness: Hyperplane::new(Point::x(), b), tolerance: 0.0 };
    }
    if d == 2 {
        width_2d_exact(pts)
    } else {
        width_search(d, pts, DEFAULT_DIRECTIONS)
    }
}

/// Width by direction search, with its certified tolerance.
pub fn width_search(d: usize, pts: &[Point], directions: usize) -> Width {
    let center = pts.iter().sum::<Point>() / pts.len() as f64;
    let lip = pts.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
    let dm = minimize_over_directions(d, directions, &|u| half_range(pts, u).0);
    let (w, b) = half_range(pts, &dm.dir);
    Width {
        width: w,
        witness: Hyperplane::new(dm.dir, b),
        tolerance: lip * dm.covering,
    }
}

fn cross2(o: &Point, a: &Point, b: &Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise convex hull (monotone chain) of planar points.
pub fn convex_hull_2d(pts: &[Point]) -> Vec<Point> {
    let mut p: Vec<Point> = pts.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    p.dedup_by(|a, b| a.x == b.x && a.y == b.y);
    if p.len() <= 2 {
        return p;
    }
    let mut lower: Vec<Point> = Vec::new();
    for q in &p {
        while lower.len() >= 2 && cross2(&lower[lower.len() - 2], &lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(*q);
    }
    let mut upper: Vec<Point> = Vec::new();
    for q in p.iter().rev() {
        while upper.len() >= 2 && cross2(&upper[upper.len() - 2], &upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(*q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_in_convex_polygon(hull: &[Point], x: &Point, tol: f64) -> bool {
    let n = hull.len();
    let scale = hull.iter().map(|p| p.norm()).fold(1.0, f64::max);
    (0..n).all(|i| cross2(&hull[i], &hull[(i + 1) % n], x) >= -tol * scale * scale)
}

fn width_2d_exact(pts: &[Point]) -> Width {
    let hull = convex_hull_2d(pts);
    if hull.len() <= 2 {
        let dir = if hull.len() == 2 { hull[1] - hull[0] } else { Point::x() };
        let normal = Point::new(-dir.y, dir.x, 0.0).normalize();
        let b = normal.dot(&hull[0]);
        return Width { width: 0.0, witness: Hyperplane::new(normal, b), tolerance: 0.0 };
    }
    let n = hull.len();
    let mut best = (f64::INFINITY, Point::x(), 0.0);
    for i in 0..n {
        let e = hull[(i + 1) % n] - hull[i];
        let normal = Point::new(-e.y, e.x, 0.0).normalize();
        let (lo, hi) = proj_range(&hull, &normal);
        if hi - lo < best.0 {
            best = (hi - lo, normal, (hi + lo) / 2.0);
        }
    }
    let (range, normal, mid) = best;
    Width { width: range / 2.0, witness: Hyperplane::new(normal, mid), tolerance: 0.0 }
}

/// A convex piece of F: conv(points) enlarged by `slack`.
#[derive(Clone, Debug)]
pub struct Piece {
    pub points: Vec<Point>,
    pub slack: f64,
}

/// Certified lower bound on the diffuseness constant.
#[derive(Clone, Debug, Serialize)]
pub struct DiffuseConstant {
    pub c_low: f64,
    /// Best value found by the search (an upper estimate of the constant).
    pub c_search: f64,
    pub witness: Hyperplane,
    pub covering_angle: f64,
    pub note: Option<String>,
}

/// c*(Φ,F) ≥ c_low for the images φ_i(F), F given as a polytope or cloud.
pub fn diffuseness_constant(maps: &[SimilarityMap], f: &PointCloud, directions: usize) -> DiffuseConstant {
    let zero = |note: &str| DiffuseConstant {
        c_low: 0.0,
        c_search: 0.0,
        witness: Hyperplane::new(Point::x(), 0.0),
        covering_angle: 0.0,
        note: Some(note.into()),
    };
    if f.is_empty() || maps.is_empty() {
        return zero("empty input");
    }
    if maps.len() == 1 {
        return zero("a single image always meets a hyperplane through it");
    }
    if f.points.len() > 1 && width_of(f.d, &f.points).width <= 1e-12 {
        return zero("degenerate F (width 0)");
    }
    let pieces: Vec<Piece> = maps
        .iter()
        .map(|m| Piece { points: f.points.iter().map(|p| m.apply(p)).collect(), slack: f.eps * m.ratio })
        .collect();
    pieces_constant(f.d, &pieces, directions)
}

fn pieces_objective(pieces: &[Piece], u: &Point) -> (f64, f64) {
    let mut max_lo = f64::NEG_INFINITY;
    let mut min_hi = f64::INFINITY;
    for p in pieces {
        let (lo, hi) = proj_range(&p.points, u);
        max_lo = max_lo.max(lo - p.slack);
        min_hi = min_hi.min(hi + p.slack);
    }
    (((max_lo - min_hi) / 2.0).max(0.0), (max_lo + min_hi) / 2.0)
}

/// min over hyperplanes L of max_i dist(piece_i, L), certified from below.
pub fn pieces_constant(d: usize, pieces: &[Piece], directions: usize) -> DiffuseConstant {
    let all: Vec<&Point> = pieces.iter().flat_map(|p| &p.points).collect();
    let center = all.iter().copied().sum::<Point>() / all.len() as f64;
    let lip = all.iter().map(|p| (*p - center).norm()).fold(0.0, f64::max);
    let dm = minimize_over_directions(d, directions, &|u| pieces_objective(pieces, u).0);
    let (v, b) = pieces_objective(pieces, &dm.dir);
    DiffuseConstant {
        c_low: (dm.grid_min - lip * dm.covering).max(0.0).min(dm.value),
        c_search: v,
        witness: Hyperplane::new(dm.dir, b),
        covering_angle: dm.covering,
        note: None,
    }
}

/// Uniform-grid spatial hash for ball queries.
pub struct SpatialIndex<'a> {
    pts: &'a [Point],
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> SpatialIndex<'a> {
    pub fn new(pts: &'a [Point], cell: f64) -> Self {
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        SpatialIndex { pts, cell, map }
    }

    fn key(p: &Point, cell: f64) -> (i64, i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    /// Points within distance `r` of `x`.
    pub fn ball(&self, x: &Point, r: f64) -> Vec<Point> {
        let lo = Self::key(&(x - Point::repeat(r)), self.cell);
        let hi = Self::key(&(x + Point::repeat(r)), self.cell);
        let cells = ((hi.0 - lo.0 + 1) * (hi.1 - lo.1 + 1) * (hi.2 - lo.2 + 1)) as usize;
        let mut out = Vec::new();
        let mut push = |idx: &Vec<u32>| {
            for &i in idx {
                let p = self.pts[i as usize];
                if (p - x).norm() <= r {
                    out.push(p);
                }
            }
        };
        if cells > self.map.len() {
            for idx in self.map.values() {
                push(idx);
            }
        } else {
            for a in lo.0..=hi.0 {
                for b in lo.1..=hi.1 {
                    for c in lo.2..=hi.2 {
                        if let Some(idx) = self.map.get(&(a, b, c)) {
                            push(idx);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn count_within(&self, x: &Point, r: f64) -> usize {
        self.ball(x, r).len()
    }
}

/// Geometric ladder of `count` values between `lo` and `hi`.
pub fn geometric_ladder(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo * (hi / lo).powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// A ball (center, radius) with the width found inside it.
#[derive(Clone, Debug, Serialize)]
pub struct BallWitness {
    pub center: [f64; 3],
    pub xi: f64,
    pub width: f64,
    pub hyperplane: Hyperplane,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffuseCheck {
    pub pass: bool,
    pub beta: f64,
    pub scales: Vec<f64>,
    pub tested: usize,
    pub skipped: usize,
    pub failures: usize,
    /// min over tested balls of width/ξ.
    pub worst_ratio: f64,
    pub witness: Option<BallWitness>,
}

/// Test width(cloud ∩ B_{ξ−2ε}(x)) > βξ + ε at `samples` random centers
/// per scale.
pub fn empirical_diffuse_check(
    cloud: &PointCloud,
    beta: f64,
    scales: &[f64],
    samples: usize,
    seed: u64,
) -> Result<DiffuseCheck> {
    if !(beta > 0.0) {
        return Err(Error::invalid("β must be positive"));
    }
    if cloud.is_empty() {
        return Err(Error::DegenerateSample("empty cloud".into()));
    }
    let eps = cloud.eps;
    let min_scale = scales.iter().cloned().fold(f64::INFINITY, f64::min);
    let index = SpatialIndex::new(&cloud.points, min_scale.max(eps).max(1e-12));
    let results: Vec<Option<(f64, f64, BallWitness)>> = (0..samples * scales.len())
        .into_par_iter()
        .map(|t| {
            let xi = scales[t % scales.len()];
            let mut rng = trial_rng(seed, t as u64);
            let x = cloud.points[rng.random_range(0..cloud.len())];
            let r = xi - 2.0 * eps;
            if r <= 0.0 {
                return None;
            }
            let pts = index.ball(&x, r);
            let w = width_of(cloud.d, &pts);
            let margin = w.width - w.tolerance - eps - beta * xi;
            Some((
                (w.width - w.tolerance - eps) / xi,
                margin,
                BallWitness { center: [x.x, x.y, x.z], xi, width: w.width, hyperplane: w.witness },
            ))
        })
        .collect();
    let mut tested = 0;
    let mut failures = 0;
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for (ratio, margin, ball) in results.into_iter().flatten() {
        tested += 1;
        if margin <= 0.0 {
            failures += 1;
        }
        if ratio < worst {
            worst = ratio;
            witness = Some(ball);
        }
    }
    Ok(DiffuseCheck {
        pass: failures == 0 && tested > 0,
        beta,
        scales: scales.to_vec(),
        tested,
        skipped: samples * scales.len() - tested,
        failures,
        worst_ratio: worst,
        witness: if failures > 0 || tested > 0 { witness } else { None },
    })
}

/// Search for a ball B_ξ(x), ξ in `scales`, holding more than d points
/// with width ≤ β·ξ. Candidate centers are ranked by how few neighbours
/// they have at the first scale.
pub fn search_flat_ball(
    cloud: &PointCloud,
    beta: f64,
    budget: usize,
    scales: &[f64],
    seed: u64,
) -> Option<BallWitness> {
    if cloud.is_empty() || scales.is_empty() {
        return None;
    }
    let xi0 = scales[0];
    let index = SpatialIndex::new(&cloud.points, xi0);
    // Balls holding at most d points are flat for trivial reasons.
    let mut order: Vec<(usize, u64, usize)> = cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let tie = crate::rng::derive_seed(seed, i as u64);
            (index.count_within(p, xi0), tie, i)
        })
        .filter(|&(n, _, _)| n > cloud.d)
        .collect();
    order.sort_unstable();
    let per_scale = (budget / scales.len()).max(1);
    scales.iter().find_map(|&xi| {
        order[..order.len().min(per_scale)].par_iter().find_map_first(|&(_, _, i)| {
            let x = cloud.points[i];
            let ball = index.ball(&x, xi);
            if ball.len() <= cloud.d {
                return None;
            }
            let w = width_of(cloud.d, &ball);
            (w.width <= beta * xi).then(|| BallWitness {
                center: [x.x, x.y, x.z],
                xi,
                width: w.width,
                hyperplane: w.witness,
            })
        })
    })
}

/// Largest number of section words a ∈ Π_ρ whose cell φ_a(Ū) meets a ball
/// of radius ρ centered at a sampled point of the attractor.
pub fn osc_overlap_count(ifs: &SimilarityIfs, rho: f64, samples: usize, seed: u64) -> Result<usize> {
    let Some(u) = ifs.osc.clone() else {
        return Err(Error::Capability("IFS has no OSC set".into()));
    };
    let weights = ifs.weights();
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid("ρ must lie in (0,1)"));
    }
    let sec = pi_section(&weights, rho, DEFAULT_NODE_BUDGET)?;
    let base = ifs.centroid();
    let depth = ((rho * 1e-3).ln() / ifs.r_max().ln()).ceil() as usize;
    let counts: Vec<usize> = (0..samples as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let w: Vec<Letter> = (0..depth).map(|_| rng.random_range(0..ifs.len() as u32)).collect();
            let x = ifs.word_map(&w).expect("letters in range").apply(&base);
            let mut count = 0;
            let mut stack = vec![(Vec::<Letter>::new(), SimilarityMap::identity())];
            while let Some((w, m)) = stack.pop() {
                if m.ratio * u.distance(&m.apply_inverse(&x)) > rho {
                    continue;
                }
                if sec.contains(&w) {
                    count += 1;
                    continue;
                }
                for (l, f) in ifs.maps.iter().enumerate() {
                    let mut w2 = w.clone();
                    w2.push(l as Letter);
                    stack.push((w2, m.compose(f)));
                }
            }
            count
        })
        .collect();
    Ok(counts.into_iter().max().unwrap_or(0))
}

#[derive(Clone, Debug, Serialize)]
pub struct BoxDimension {
    pub estimate: f64,
    /// (δ, N(δ)) per scale.
    pub counts: Vec<(f64, usize)>,
}

/// Box-counting slope on a geometric ladder clipped to [4ε, diam/4].
pub fn box_dimension(cloud: &PointCloud, scale_count: usize) -> Result<BoxDimension> {
    let lo = 4.0 * cloud.eps;
    let hi = cloud.diameter_estimate() / 4.0;
    if scale_count < 3 || !(hi > lo) || lo <= 0.0 {
        return Err(Error::invalid(format!(
            "fewer than 3 usable scales in [{lo:e}, {hi:e}]"
        )));
    }
    box_dimension_at(cloud, &geometric_ladder(lo, hi, scale_count))
}

/// Box-counting slope at the given scales.
pub fn box_dimension_at(cloud: &PointCloud, scales: &[f64]) -> Result<BoxDimension> {
    if scales.len() < 3 {
        return Err(Error::invalid("fewer than 3 usable scales"));
    }
    let counts: Vec<(f64, usize)> = scales
        .par_iter()
        .map(|&s| {
            let cells: HashSet<(i64, i64, i64)> =
                cloud.points.iter().map(|p| SpatialIndex::key(p, s)).collect();
            (s, cells.len())
        })
        .collect();
    let xs: Vec<f64> = counts.iter().map(|(s, _)| -s.ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|(_, n)| (*n as f64).ln()).collect();
    Ok(BoxDimension { estimate: ls_slope(&xs, &ys), counts })
}

pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Bounds on μ(B_r(x))/r^α over sampled centers and radii.
#[derive(Clone, Debug, Serialize)]
pub struct AhlforsCheck {
    pub alpha: f64,
    pub c1_hat: f64,
    pub c2_hat: f64,
    pub spread: f64,
    pub samples: usize,
    /// (r, min inner ratio, max outer ratio) per radius.
    pub per_radius: Vec<(f64, f64, f64)>,
}

/// A measured *-tree placed in space: node masses and the map of each node.
pub struct MeasuredTree<'a> {
    pub tree: &'a StarTree,
    pub masses: &'a [f64],
    pub maps: &'a [SimilarityMap],
    pub ball: (Point, f64),
}

impl MeasuredTree<'_> {
    fn cell(&self, id: usize) -> (Point, f64) {
        let m = &self.maps[id];
        (m.apply(&self.ball.0), m.ratio * self.ball.1)
    }

    /// (inner, outer) bounds on μ(B_r(x)).
    pub fn ball_mass(&self, x: &Point, r: f64) -> (f64, f64) {
        let mut inner = 0.0;
        let mut outer = 0.0;
        let mut stack = vec![self.tree.root()];
        while let Some(id) = stack.pop() {
            let (c, rad) = self.cell(id);
            let dist = (c - x).norm();
            if dist - rad > r {
                continue;
            }
            if dist + rad <= r {
                inner += self.masses[id];
                outer += self.masses[id];
                continue;
            }
            let kids = self.tree.children(id);
            if kids.is_empty() {
                outer += self.masses[id];
            } else {
                stack.extend_from_slice(kids);
            }
        }
        (inner, outer)
    }

    /// A point of the support drawn from μ.
    pub fn sample_point<R: Rng>(&self, rng: &mut R) -> Point {
        let mut id = self.tree.root();
        loop {
            let kids = self.tree.children(id);
            if kids.is_empty() {
                return self.cell(id).0;
            }
            let total: f64 = kids.iter().map(|&k| self.masses[k]).sum();
            let mut u = rng.random::<f64>() * total;
            let mut next = kids[kids.len() - 1];
            for &k in kids {
                u -= self.masses[k];
                if u <= 0.0 {
                    next = k;
                    break;
                }
            }
            id = next;
        }
    }
}

/// Sample (x, r) pairs with x ~ μ and r from `radii`, returning the extreme
/// ratios inner/r^α and outer/r^α.
pub fn ahlfors_ratio_check(
    mt: &MeasuredTree<'_>,
    alpha: f64,
    radii: &[f64],
    samples: usize,
    seed: u64,
) -> Result<AhlforsCheck> {
    if radii.is_empty() || samples == 0 {
        return Err(Error::invalid("need radii and samples"));
    }
    let res: Vec<(usize, f64, f64)> = (0..samples as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let x = mt.sample_point(&mut rng);
            let ri = t as usize % radii.len();
            let r = radii[ri];
            let (inner, outer) = mt.ball_mass(&x, r);
            (ri, inner / r.powf(alpha), outer / r.powf(alpha))
        })
        .collect();
    let mut per: Vec<(f64, f64, f64)> = radii.iter().map(|&r| (r, f64::INFINITY, 0.0)).collect();
    for (ri, lo, hi) in &res {
        per[*ri].1 = per[*ri].1.min(*lo);
        per[*ri].2 = per[*ri].2.max(*hi);
    }
    let c1 = res.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let c2 = res.iter().map(|x| x.2).fold(0.0, f64::max);
    Ok(AhlforsCheck { alpha, c1_hat: c1, c2_hat: c2, spread: c2 / c1, samples, per_radius: per })
}

/// F_B(cloud ∩ B) for B = B_radius(center).
pub fn miniset(cloud: &PointCloud, center: &Point, radius: f64) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let near = cloud.points.iter().any(|p| (p - center).norm() <= cloud.eps.max(1e-12));
    if !near {
        return Err(Error::invalid("ball center is not within ε of the cloud"));
    }
    let points: Vec<Point> = cloud
        .points
        .iter()
        .filter(|p| (*p - center).norm() <= radius)
        .map(|p| (p - center) / radius)
        .collect();
    if points.is_empty() {
        return Err(Error::invalid("empty intersection"));
    }
    Ok(PointCloud { d: cloud.d, points, eps: cloud.eps / radius })
}

/// Leaf words of a *-tree, concatenated with `prefix`.
pub fn star_leaf_words(star: &StarTree, prefix: &Word) -> Vec<Word> {
    star.at_height(star.height()).into_iter().map(|i| prefix.concat(&star.word(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pt(x: f64, y: f64) -> Point {
        Point::new(x, y, 0.0)
    }

    #[test]
    fn percolation_word_map() {
        let ifs = SimilarityIfs::percolation(3, 2).unwrap();
        // letter 5 = digits (1, 2), letter 7 = digits (2, 1)
        let m = ifs.word_map(&[5, 7]).unwrap();
        let x = pt(0.3, 0.6);
        let expect = pt(0.3 / 9.0 + 1.0 / 3.0 + 2.0 / 9.0, 0.6 / 9.0 + 2.0 / 3.0 + 1.0 / 9.0);
        assert_abs_diff_eq!((m.apply(&x) - expect).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.ratio, 1.0 / 9.0, epsilon = 1e-15);
        assert_eq!(ifs.word_map(&[]).unwrap(), SimilarityMap::identity());
    }

    #[test]
    fn osc_checks() {
        assert!(SimilarityIfs::percolation(3, 2).unwrap().check_osc().unwrap());
        assert!(SimilarityIfs::sierpinski().check_osc().unwrap());
        let bad = SimilarityIfs::new(
            2,
            vec![SimilarityMap::planar(0.6, 0.0, [0.0, 0.0]).unwrap(), SimilarityMap::planar(0.6, 0.0, [0.4, 0.0]).unwrap()],
            Some(OscSet::Box { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] }),
        )
        .unwrap();
        assert!(!bad.check_osc().unwrap());
    }

    #[test]
    fn json_round_trip() {
        let ifs = SimilarityIfs::sierpinski();
        let back = SimilarityIfs::from_json(&ifs.to_json()).unwrap();
        assert_eq!(back.maps, ifs.maps);
        assert_eq!(back.osc, ifs.osc);
        let rot = SimilarityIfs::from_json(r#"{"d":2,"maps":[{"r":0.5,"angle":1.0,"t":[0,0]}]}"#).unwrap();
        assert!((rot.maps[0].orth[(1, 0)] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn moran_closed_forms() {
        let off = OffspringDistribution::binomial(9, 0.6).unwrap();
        let w = Weights::uniform(9, 1.0 / 3.0).unwrap();
        let d = moran_exponent(&off, &w, 1e-12).unwrap();
        assert_abs_diff_eq!(d, 5.4f64.ln() / 3f64.ln(), epsilon = 1e-9);
        let full = OffspringDistribution::bernoulli(vec![1.0; 3]).unwrap();
        let w = Weights::uniform(3, 0.5).unwrap();
        assert_abs_diff_eq!(moran_exponent(&full, &w, 1e-12).unwrap(), 3f64.log2(), epsilon = 1e-9);
        let sub = OffspringDistribution::binomial(2, 0.4).unwrap();
        assert!(moran_exponent(&sub, &Weights::uniform(2, 0.5).unwrap(), 1e-9).is_err());
    }

    #[test]
    fn width_examples() {
        let sq = [pt(0.0, 0.0), pt(1.0, 0.0), pt(0.0, 1.0), pt(1.0, 1.0)];
        let w = width_of(2, &sq);
        assert_abs_diff_eq!(w.width, 0.5, epsilon = 1e-12);
        let n = w.witness.unit_normal();
        assert!(n.x.abs() > 1.0 - 1e-12 || n.y.abs() > 1.0 - 1e-12);
        let s = width_search(2, &sq, 2000);
        assert_abs_diff_eq!(s.width, 0.5, epsilon = 1e-9);
        let line = [pt(0.0, 0.0), pt(1.0, 2.0), pt(2.0, 4.0)];
        assert_abs_diff_eq!(width_of(2, &line).width, 0.0, epsilon = 1e-12);
        assert_eq!(width_of(2, &[pt(3.0, 1.0)]).width, 0.0);
    }

    #[test]
    fn width_3d_cube() {
        let pts: Vec<Point> = (0..8)
            .map(|m| Point::new((m & 1) as f64, (m >> 1 & 1) as f64, (m >> 2 & 1) as f64))
            .collect();
        let w = width_of(3, &pts);
        assert!((w.width - 0.5).abs() < 1e-6, "{}", w.width);
    }

    #[test]
    fn diffuseness_full_grid_positive_and_single_map_zero() {
        let ifs = SimilarityIfs::percolation(3, 2).unwrap();
        let f = PointCloud::new(2, ifs.hull_polytope(), 0.0);
        let c = diffuseness_constant(&ifs.maps, &f, 2000);
        assert!(c.c_low > 0.1 && c.c_low <= 1.0 / 6.0 + 1e-9, "{c:?}");
        let one = diffuseness_constant(&ifs.maps[..1], &f, 2000);
        assert_eq!(one.c_low, 0.0);
        // A row of cells all meets the horizontal midline.
        let row: Vec<SimilarityMap> = [1u32, 4, 7].iter().map(|&i| ifs.maps[i as usize].clone()).collect();
        assert_eq!(diffuseness_constant(&row, &f, 2000).c_low, 0.0);
    }

    #[test]
    fn bounding_ball_contains_render() {
        let ifs = SimilarityIfs::sierpinski();
        let (c, r) = ifs.bounding_ball();
        let cloud = render_full(&ifs, 6, Some(ifs.maps[0].fixed_point())).unwrap();
        assert!(cloud.points.iter().all(|p| (p - c).norm() <= r + 1e-12));
        assert_eq!(ifs.hull_polytope().len(), 3);
    }

    #[test]
    fn box_dimension_of_square_grid() {
        let n = 1000;
        let pts: Vec<Point> = (0..n * n)
            .map(|i| pt((i % n) as f64 / n as f64 + 5e-4, (i / n) as f64 / n as f64 + 5e-4))
            .collect();
        let cloud = PointCloud::new(2, pts, 1e-3);
        let b = box_dimension(&cloud, 8).unwrap();
        assert!((b.estimate - 2.0).abs() < 0.05, "{b:?}");
    }

    #[test]
    fn overlap_count_single_map() {
        let ifs = SimilarityIfs::new(
            2,
            vec![SimilarityMap::planar(0.5, 0.0, [0.0, 0.0]).unwrap()],
            Some(OscSet::Box { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] }),
        )
        .unwrap();
        assert_eq!(osc_overlap_count(&ifs, 0.1, 10, 0).unwrap(), 1);
    }

    #[test]
    fn miniset_composes() {
        let pts: Vec<Point> = (0..100).map(|i| pt(i as f64 / 100.0, (i * 37 % 100) as f64 / 100.0)).collect();
        let cloud = PointCloud::new(2, pts, 1e-3);
        let c = cloud.points[50];
        let m1 = miniset(&cloud, &c, 0.5).unwrap();
        let m2 = miniset(&m1, &Point::zeros(), 0.4).unwrap();
        let direct = miniset(&cloud, &c, 0.2).unwrap();
        assert_eq!(m2.len(), direct.len());
        for (a, b) in m2.points.iter().zip(&direct.points) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn pgm_is_deterministic() {
        let cloud = PointCloud::new(2, vec![pt(0.1, 0.1), pt(0.9, 0.9)], 0.0);
        let a = cloud.to_pgm([0.0, 0.0], [1.0, 1.0], 4, 4, 0.0);
        assert_eq!(a, cloud.to_pgm([0.0, 0.0], [1.0, 1.0], 4, 4, 0.0));
        let body = &a[a.len() - 16..];
        assert_eq!(body.iter().filter(|&&x| x == 0).count(), 2);
        assert_eq!(body[12], 0); // bottom-left pixel
    }

    #[test]
    fn pgm_footprint_fills_grid_cells() {
        // Centers of the four quarter cells, each painting exactly its cell.
        let cloud = PointCloud::new(2, vec![pt(0.25, 0.25), pt(0.75, 0.75)], 0.0);
        let a = cloud.to_pgm([0.0, 0.0], [1.0, 1.0], 4, 4, 0.25);
        let body = &a[a.len() - 16..];
        assert_eq!(body.iter().filter(|&&x| x == 0).count(), 8);
        assert_eq!(&body[8..10], &[0, 0]);
        assert_eq!(&body[10..12], &[255, 255]);
    }
}
