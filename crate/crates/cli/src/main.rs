mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use gwfract::branching::{extinction_frequency, extinction_prob, sample_gw_with_budget};
use gwfract::experiments::{
    exp_convergence_g_k, exp_dimension_ladder, exp_non_diffuseness, grid_box_dimension, ExperimentReport, Percolation,
    Verdict,
};
use gwfract::extraction::{
    general_pipeline, percolation_pipeline, GeneralParams, PercolationParams, PercolationWitness, ScanOptions,
    DEFAULT_GROUP_C,
};
use gwfract::fixpoint::{g_k_a_curve, smallest_fixed_point, CollectionSpec, GFunction};
use gwfract::geometry::{
    ahlfors_ratio_check, box_dimension, empirical_diffuse_check, geometric_ladder, moran_exponent, pieces_constant,
    render_full, render_tree, OscSet, Piece, COARSE_DIRECTIONS, DEFAULT_DIRECTIONS,
};
use gwfract::symbolic::DEFAULT_NODE_BUDGET;
use gwfract::{Error, ExtractedSubset, FiniteTree, OffspringDistribution, PointCloud, Result, SimilarityIfs};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "gwfract", version, about = "Galton-Watson fractals: simulate, solve, extract, check")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// JSON run configuration; flags on the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads (default: logical cores). Results do not depend on it.
    #[arg(long, global = true, env = "GWFRACT_THREADS")]
    threads: Option<usize>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Include wall-clock timings in reports (breaks byte-for-byte reproducibility).
    #[arg(long, global = true)]
    timing: bool,
    /// Output directory for files written by the command.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a realization and optionally render it.
    Simulate(SimulateArgs),
    /// Extinction probability as the smallest fixed point of the pgf.
    Extinction(ExtinctionArgs),
    /// Almost-sure dimension of the limit set (Moran exponent).
    Moran(MoranArgs),
    /// Smallest fixed point s0 of g for a monotone collection.
    Fixpoint(FixpointArgs),
    /// The curve k -> g_{k,ceil(c^k)}(s).
    GkCurve(GkArgs),
    /// Extract a diffuse Ahlfors-regular subset from one realization.
    Extract(ExtractArgs),
    /// Certified diffuseness constant of the level-j images of an IFS.
    DiffuseCert(DiffuseCertArgs),
    /// Empirical hyperplane-diffuseness check on a point cloud.
    CheckDiffuse(CheckDiffuseArgs),
    /// Ahlfors-regularity ratio check on a saved subset.
    CheckAhlfors(CheckAhlforsArgs),
    /// Box-counting dimension of a point cloud.
    Boxdim(BoxdimArgs),
    /// Run a named experiment and emit its report.
    Experiment(ExperimentArgs),
    /// Rasterize an attractor, a tree, or a point cloud.
    Render(RenderArgs),
}

#[derive(Args, Clone, Default)]
struct Source {
    /// Fractal percolation shorthand: b=3,d=2,p=0.6.
    #[arg(long, conflicts_with = "ifs")]
    percolation: Option<String>,
    /// "sierpinski", a path to an IFS JSON file, or inline JSON.
    #[arg(long)]
    ifs: Option<String>,
    /// Offspring law: bin:N:p, bern:p1,p2,..., a JSON file, or inline JSON.
    #[arg(long)]
    offspring: Option<String>,
}

#[derive(Args)]
struct ScanArgs {
    /// Compressed levels of the extracted tree (default: as many as the leaf budget allows).
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    leaf_budget: usize,
    #[arg(long, default_value_t = 10_000)]
    max_vertices: usize,
    #[arg(long, default_value_t = 3)]
    max_vertex_level: usize,
    #[arg(long, default_value_t = 50_000_000)]
    node_budget: u64,
    /// Directions used when certifying diffuseness constants.
    #[arg(long, default_value_t = COARSE_DIRECTIONS)]
    directions: usize,
}

impl ScanArgs {
    fn options(&self) -> ScanOptions {
        ScanOptions {
            levels: self.levels,
            leaf_budget: self.leaf_budget,
            max_vertices: self.max_vertices,
            max_vertex_level: self.max_vertex_level,
            node_budget: self.node_budget,
            directions: self.directions,
        }
    }
}

#[derive(Args)]
struct Raster {
    /// PGM raster of the (x,y) projection.
    #[arg(long, value_name = "PGM")]
    render: Option<PathBuf>,
    /// Raster width in pixels.
    #[arg(long, default_value_t = 729)]
    size: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = DEFAULT_NODE_BUDGET)]
    budget: usize,
    #[command(flatten)]
    raster: Raster,
    /// CSV of the deepest-level points.
    #[arg(long, value_name = "CSV")]
    cloud: Option<PathBuf>,
    /// Text dump of the sampled tree.
    #[arg(long, value_name = "TXT")]
    tree: Option<PathBuf>,
}

#[derive(Args)]
struct ExtinctionArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Also estimate P(extinct by generation --mc-depth) over this many trials.
    #[arg(long, default_value_t = 0)]
    mc_trials: u64,
    #[arg(long, default_value_t = 30)]
    mc_depth: usize,
}

#[derive(Args)]
struct MoranArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 1e-13)]
    tol: f64,
}

#[derive(Args)]
struct FixpointArgs {
    #[command(flatten)]
    source: Source,
    /// ary:A, block:B:K[:D], gens:0,1;2, or JSON.
    #[arg(long)]
    collection: String,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
}

#[derive(Args)]
struct GkArgs {
    #[command(flatten)]
    source: Source,
    /// Growth rate of the threshold a_k = ceil(c^k).
    #[arg(long)]
    c: f64,
    /// Thinning level.
    #[arg(long, default_value_t = 0.5)]
    s: f64,
    #[arg(long, default_value_t = 6)]
    k_max: usize,
    /// Monte Carlo trials per point when exact evaluation is out of reach.
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// CSV of the curve (default: curve.csv under --out, if given).
    #[arg(long, value_name = "CSV")]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WitnessKind {
    Section,
    Block,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    source: Source,
    /// Percolation: growth c of the subtree arity (m > c).
    #[arg(long)]
    c: Option<f64>,
    /// Percolation: compression depth (default: the smallest that works).
    #[arg(long)]
    k: Option<usize>,
    /// Percolation: how each node's children are certified diffuse.
    #[arg(long, value_enum, default_value = "section")]
    witness: WitnessKind,
    /// Required diffuseness constant of each group of children.
    #[arg(long, default_value_t = DEFAULT_GROUP_C)]
    group_c: f64,
    /// General IFS: compression scale ρ.
    #[arg(long)]
    rho: Option<f64>,
    /// General IFS: target exponent α with ρ^(-α) an integer.
    #[arg(long)]
    alpha: Option<f64>,
    /// General IFS: required diffuseness constant (default: a quarter of the full section's).
    #[arg(long)]
    diffuse_c: Option<f64>,
    #[command(flatten)]
    scan: ScanArgs,
    #[command(flatten)]
    raster: Raster,
}

#[derive(Args)]
struct DiffuseCertArgs {
    #[command(flatten)]
    source: Source,
    /// Word length j of the images φ_w(F), |w| = j.
    #[arg(long, default_value_t = 1)]
    section_depth: usize,
    #[arg(long, default_value_t = DEFAULT_DIRECTIONS)]
    directions: usize,
}

#[derive(Args)]
struct CloudInput {
    /// Directory written by `extract --out`.
    #[arg(long, value_name = "DIR", conflicts_with = "cloud")]
    subset: Option<PathBuf>,
    /// Point cloud CSV (x,y or x,y,z with a header row).
    #[arg(long, value_name = "CSV", requires = "eps")]
    cloud: Option<PathBuf>,
    /// Rendering precision ε of the cloud.
    #[arg(long)]
    eps: Option<f64>,
}

impl CloudInput {
    fn load(&self) -> Result<(PointCloud, Option<ExtractedSubset>)> {
        match (&self.subset, &self.cloud) {
            (Some(dir), _) => {
                let sub = ExtractedSubset::load(dir)?;
                Ok((sub.cloud.clone(), Some(sub)))
            }
            (None, Some(path)) => {
                let text = read(path)?;
                Ok((PointCloud::from_csv(&text, self.eps.unwrap_or(0.0))?, None))
            }
            (None, None) => Err(invalid("give --subset DIR or --cloud CSV --eps E")),
        }
    }
}

#[derive(Args)]
struct CheckDiffuseArgs {
    #[command(flatten)]
    input: CloudInput,
    /// Diffuseness constant to test (default: the subset's certified β).
    #[arg(long)]
    beta: Option<f64>,
    /// Ball radii (default: the subset's certified window, or three scales in [4ε, diam/8]).
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Random centers per scale.
    #[arg(long, default_value_t = 70)]
    samples: usize,
}

#[derive(Args)]
struct CheckAhlforsArgs {
    /// Directory written by `extract --out`.
    #[arg(long, value_name = "DIR")]
    subset: PathBuf,
    #[arg(long, default_value_t = 8)]
    radii: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Exponent to test (default: the subset's α).
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct BoxdimArgs {
    #[command(flatten)]
    input: CloudInput,
    /// Number of geometric scales in [4ε, diam/4].
    #[arg(long, default_value_t = 8)]
    scales: usize,
    /// For a percolation subset: count aligned boxes of side b^-j instead.
    #[arg(long)]
    grid: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentId {
    /// g_{k,ceil(c^k)}(s) against its limit.
    #[value(name = "convergence-g-k")]
    ConvergenceGK,
    /// Box dimension of extracted subsets against log c / log b.
    DimensionLadder,
    /// Flat balls in raw samples, none in extracted subsets.
    NonDiffuseness,
}

#[derive(Args)]
struct ExperimentArgs {
    id: ExperimentId,
    /// Percolation parameters (default: p = 0.7 for the ladder, 0.6 otherwise).
    #[arg(long)]
    percolation: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    c: f64,
    /// Growth rates for the dimension ladder.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    cs: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    s: f64,
    #[arg(long, default_value_t = 6)]
    k_max: usize,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// Seeds for the dimension ladder (default: --seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Depth of the raw sample in the non-diffuseness experiment.
    #[arg(long, default_value_t = 7)]
    depth: usize,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    /// Candidate balls examined by the flat-ball search.
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
    #[command(flatten)]
    scan: ScanArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    /// Render this tree (text format) instead of the full attractor.
    #[arg(long, value_name = "TXT", conflicts_with = "cloud")]
    tree: Option<PathBuf>,
    /// Render this point cloud CSV instead.
    #[arg(long, value_name = "CSV")]
    cloud: Option<PathBuf>,
    #[command(flatten)]
    raster: Raster,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// An explicit path, else `name` under --out, else nothing.
fn target(explicit: &Option<PathBuf>, out: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| out.as_ref().map(|d| d.join(name)))
}

fn parse_percolation(s: &str) -> Result<Percolation> {
    let bad = || invalid(format!("cannot parse percolation {s:?}; expected b=3,d=2,p=0.6"));
    let (mut b, mut d, mut p) = (None, 2u32, None);
    for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "b" => b = Some(v.trim().parse().map_err(|_| bad())?),
            "d" => d = v.trim().parse().map_err(|_| bad())?,
            "p" => p = Some(v.trim().parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let perc = Percolation { b: b.ok_or_else(bad)?, d, p: p.ok_or_else(bad)? };
    if perc.b < 2 || !(1..=3).contains(&perc.d) || !(0.0..=1.0).contains(&perc.p) {
        return Err(invalid(format!("percolation needs b ≥ 2, d in 1..=3, p in [0,1]; got {s:?}")));
    }
    Ok(perc)
}

/// Inline JSON, or else the contents of a file if one exists at that path.
fn inline_or_file(s: &str) -> Result<String> {
    let t = s.trim();
    if t.starts_with('{') || !Path::new(t).is_file() {
        Ok(t.to_string())
    } else {
        read(Path::new(t))
    }
}

impl Source {
    fn percolation(&self) -> Result<Option<Percolation>> {
        self.percolation.as_deref().map(parse_percolation).transpose()
    }

    fn ifs(&self) -> Result<SimilarityIfs> {
        if let Some(perc) = self.percolation()? {
            return perc.ifs();
        }
        match self.ifs.as_deref() {
            Some("sierpinski") => Ok(SimilarityIfs::sierpinski()),
            Some(s) => SimilarityIfs::from_json(&inline_or_file(s)?),
            None => Err(invalid("give --percolation or --ifs")),
        }
    }

    fn offspring(&self) -> Result<OffspringDistribution> {
        if let Some(s) = &self.offspring {
            return OffspringDistribution::parse(&inline_or_file(s)?);
        }
        match self.percolation()? {
            Some(perc) => perc.offspring(),
            None => Err(invalid("give --offspring or --percolation")),
        }
    }

    /// IFS and offspring law over the same alphabet.
    fn model(&self) -> Result<(SimilarityIfs, OffspringDistribution)> {
        let ifs = self.ifs()?;
        let off = self.offspring()?;
        if off.alphabet_size() as usize != ifs.len() {
            return Err(invalid(format!(
                "offspring alphabet has {} letters but the IFS has {} maps",
                off.alphabet_size(),
                ifs.len()
            )));
        }
        Ok((ifs, off))
    }
}

/// Rectangle framing the attractor in the (x,y) plane.
fn frame(ifs: &SimilarityIfs) -> ([f64; 2], [f64; 2]) {
    if let Some(OscSet::Box { lo, hi }) = &ifs.osc {
        return ([lo[0], lo[1]], [hi[0], hi[1]]);
    }
    let hull = ifs.hull_polytope();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &hull {
        for j in 0..2 {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    (lo, hi)
}

fn frame_of(cloud: &PointCloud) -> ([f64; 2], [f64; 2]) {
    match cloud.bbox() {
        Some((lo, hi)) => {
            let pad = cloud.eps.max(1e-9 * (hi - lo).norm().max(1.0));
            ([lo.x - pad, lo.y - pad], [hi.x + pad, hi.y + pad])
        }
        None => ([0.0, 0.0], [1.0, 1.0]),
    }
}

/// Rasterize, painting each point as the cell of side `cell` around it.
fn raster(cloud: &PointCloud, (lo, hi): ([f64; 2], [f64; 2]), width: usize, cell: f64) -> Result<Vec<u8>> {
    if width == 0 || !(hi[0] > lo[0] && hi[1] > lo[1]) {
        return Err(invalid("empty raster"));
    }
    let height = ((width as f64) * (hi[1] - lo[1]) / (hi[0] - lo[0])).round().max(1.0) as usize;
    Ok(cloud.to_pgm(lo, hi, width, height, cell / 2.0))
}

/// Side of the frame-relative cell each point of a depth-n rendering stands for.
fn cell_side(ifs: &SimilarityIfs, cloud: &PointCloud, (lo, hi): ([f64; 2], [f64; 2])) -> f64 {
    let r = cloud.eps / ifs.diameter_bound();
    r * (hi[0] - lo[0]).max(hi[1] - lo[1])
}

struct Ctx {
    json: bool,
    seed: u64,
    timing: bool,
    out: Option<PathBuf>,
}

/// Output of a command: a JSON document and the exit code it implies.
struct Outcome {
    doc: Value,
    code: u8,
}

impl From<Value> for Outcome {
    fn from(doc: Value) -> Self {
        Outcome { doc, code: 0 }
    }
}

fn simulate(a: &SimulateArgs, cx: &Ctx) -> Result<Outcome> {
    let (ifs, off) = a.source.model()?;
    let sample = sample_gw_with_budget(&off, a.depth, cx.seed, a.budget)?;
    let tree = &sample.tree;
    let cloud = render_tree(&ifs, tree, None)?;
    if let Some(p) = target(&a.raster.render, &cx.out, "sample.pgm") {
        let fr = frame(&ifs);
        write(&p, raster(&cloud, fr, a.raster.size, cell_side(&ifs, &cloud, fr))?)?;
    }
    if let Some(p) = target(&a.cloud, &cx.out, "cloud.csv") {
        write(&p, cloud.to_csv())?;
    }
    if let Some(p) = target(&a.tree, &cx.out, "tree.txt") {
        write(&p, tree.to_text())?;
    }
    Ok(json!({
        "seed": cx.seed,
        "depth": a.depth,
        "mean_offspring": off.mean(),
        "generation_sizes": tree.level_sizes(),
        "extinct_at": tree.extinct_at(),
        "nodes": tree.len(),
        "points": cloud.len(),
        "eps": cloud.eps,
    })
    .into())
}

fn extinction(a: &ExtinctionArgs, cx: &Ctx) -> Result<Outcome> {
    let off = a.source.offspring()?;
    let ext = extinction_prob(&off, a.tol)?;
    let mut doc = serde_json::to_value(&ext)?;
    if a.mc_trials > 0 {
        let mc = extinction_frequency(&off, a.mc_depth, a.mc_trials, cx.seed);
        doc["monte_carlo"] = json!({
            "depth": a.mc_depth,
            "estimate": mc.estimate,
            "std_err": mc.std_err,
            "hits": mc.hits,
            "trials": mc.trials,
            "within_3_sigma": mc.within_sigma(ext.q, 3.0),
        });
    }
    Ok(doc.into())
}

fn moran(a: &MoranArgs) -> Result<Outcome> {
    let ifs = a.source.ifs()?;
    // Without an offspring law the whole IFS is kept.
    let off = match (&a.source.offspring, &a.source.percolation) {
        (None, None) => OffspringDistribution::bernoulli(vec![1.0; ifs.len()])?,
        _ => a.source.offspring()?,
    };
    if off.alphabet_size() as usize != ifs.len() {
        return Err(invalid("offspring alphabet and IFS size differ"));
    }
    let delta = moran_exponent(&off, &ifs.weights(), a.tol)?;
    Ok(json!({ "delta": delta, "mean_offspring": off.mean(), "maps": ifs.len() }).into())
}

fn fixpoint(a: &FixpointArgs) -> Result<Outcome> {
    let off = a.source.offspring()?;
    let spec = CollectionSpec::parse(&a.collection)?;
    let gf = GFunction::new(off, spec.resolve()?)?;
    let fp = smallest_fixed_point(&gf, a.tol)?;
    let mut doc = serde_json::to_value(&fp)?;
    doc["collection"] = serde_json::to_value(&spec)?;
    Ok(doc.into())
}

fn gk_curve(a: &GkArgs, cx: &Ctx) -> Result<Outcome> {
    let off = a.source.offspring()?;
    if a.c.is_nan() || a.c <= 0.0 {
        return Err(invalid("--c must be positive"));
    }
    let c = a.c;
    let curve = g_k_a_curve(&off, a.k_max, |k| c.powi(k as i32).ceil() as u64, a.s, a.trials, cx.seed)?;
    if let Some(p) = target(&a.csv, &cx.out, "curve.csv") {
        let mut csv = String::from("k,a,s,value,std_err,exact\n");
        for g in &curve {
            csv.push_str(&format!("{},{},{},{},{},{}\n", g.k, g.a, g.s, g.value, g.std_err, g.exact));
        }
        write(&p, csv)?;
    }
    Ok(json!({ "c": c, "mean_offspring": off.mean(), "points": curve }).into())
}

fn extract(a: &ExtractArgs, cx: &Ctx) -> Result<Outcome> {
    let opts = a.scan.options();
    let sub = if let Some(perc) = a.source.percolation()? {
        let c = a.c.ok_or_else(|| invalid("percolation extraction needs --c"))?;
        let witness = match a.witness {
            WitnessKind::Section => PercolationWitness::SectionDiffuse { c: a.group_c },
            WitnessKind::Block => PercolationWitness::Block,
        };
        let params = PercolationParams { b: perc.b, d: perc.d, p: perc.p, c, k: a.k, witness };
        percolation_pipeline(&params, &opts, cx.seed)?
    } else {
        let (ifs, off) = a.source.model()?;
        let params = GeneralParams {
            rho: a.rho.ok_or_else(|| invalid("general extraction needs --rho"))?,
            alpha: a.alpha.ok_or_else(|| invalid("general extraction needs --alpha"))?,
            c: a.diffuse_c,
        };
        general_pipeline(&ifs, &off, &params, &opts, cx.seed)?
    };
    if let Some(dir) = &cx.out {
        sub.save(dir)?;
    }
    if let Some(p) = &a.raster.render {
        let fr = frame_of(&sub.cloud);
        let cell = sub.certificates.rho.powi(sub.levels as i32) * sub.root_map.ratio * sub.ifs.diameter_bound()
            / std::f64::consts::SQRT_2;
        write(p, raster(&sub.cloud, fr, a.raster.size, cell)?)?;
    }
    let mut doc = sub.summary_json();
    doc["seed"] = json!(cx.seed);
    Ok(doc.into())
}

fn diffuse_cert(a: &DiffuseCertArgs) -> Result<Outcome> {
    let ifs = a.source.ifs()?;
    if a.section_depth == 0 {
        return Err(invalid("--section-depth must be at least 1"));
    }
    let hull = ifs.hull_polytope();
    let words = FiniteTree::full(ifs.len() as u32, a.section_depth)?;
    let pieces = words
        .level(a.section_depth)
        .map(|id| {
            let m = ifs.word_map(&words.word(id))?;
            Ok(Piece { points: hull.iter().map(|p| m.apply(p)).collect(), slack: 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    let cert = pieces_constant(ifs.d, &pieces, a.directions);
    let mut doc = serde_json::to_value(&cert)?;
    doc["section_depth"] = json!(a.section_depth);
    doc["pieces"] = json!(pieces.len());
    doc["diameter_bound"] = json!(ifs.diameter_bound());
    Ok(doc.into())
}

fn check_diffuse(a: &CheckDiffuseArgs, cx: &Ctx) -> Result<Outcome> {
    let (cloud, sub) = a.input.load()?;
    let beta = a
        .beta
        .or_else(|| sub.as_ref().map(|s| s.certificates.beta))
        .ok_or_else(|| invalid("--beta is required for a bare cloud"))?;
    let scales = match (&a.scales, &sub) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => s.diffuse_scales(),
        (None, None) => {
            let lo = 4.0 * cloud.eps;
            let hi = cloud.diameter_estimate() / 8.0;
            if !(hi > lo && lo > 0.0) {
                return Err(invalid("cannot choose scales: give --scales"));
            }
            geometric_ladder(lo, hi, 3)
        }
    };
    let chk = empirical_diffuse_check(&cloud, beta, &scales, a.samples, cx.seed)?;
    Ok(serde_json::to_value(&chk)?.into())
}

fn check_ahlfors(a: &CheckAhlforsArgs, cx: &Ctx) -> Result<Outcome> {
    let sub = ExtractedSubset::load(&a.subset)?;
    let alpha = a.alpha.unwrap_or(sub.certificates.alpha);
    let chk = ahlfors_ratio_check(&sub.measured(), alpha, &sub.ahlfors_radii(a.radii), a.samples, cx.seed)?;
    Ok(serde_json::to_value(&chk)?.into())
}

fn boxdim(a: &BoxdimArgs) -> Result<Outcome> {
    let (cloud, sub) = a.input.load()?;
    if let Some(b) = a.grid {
        let sub = sub.ok_or_else(|| invalid("--grid needs --subset"))?;
        return Ok(json!({ "estimate": grid_box_dimension(&sub, b)?, "grid": b }).into());
    }
    Ok(serde_json::to_value(box_dimension(&cloud, a.scales)?)?.into())
}

fn experiment(a: &ExperimentArgs, cx: &Ctx) -> Result<Outcome> {
    let default_p = if matches!(a.id, ExperimentId::DimensionLadder) { 0.7 } else { 0.6 };
    let perc = match &a.percolation {
        Some(s) => parse_percolation(s)?,
        None => Percolation { b: 3, d: 2, p: default_p },
    };
    let mut report: ExperimentReport = match a.id {
        ExperimentId::ConvergenceGK => exp_convergence_g_k(perc, a.c, a.s, a.k_max, a.trials, cx.seed)?,
        ExperimentId::DimensionLadder => {
            let seeds = a.seeds.clone().unwrap_or_else(|| vec![cx.seed]);
            exp_dimension_ladder(perc, &a.cs, &seeds, &a.scan.options())?
        }
        ExperimentId::NonDiffuseness => exp_non_diffuseness(perc, a.depth, a.beta, a.budget, a.c, cx.seed)?,
    };
    if !cx.timing {
        report.runtime_secs = None;
    }
    if let Some(dir) = &cx.out {
        write(&dir.join(format!("{}.json", report.id)), report.to_json())?;
        write(&dir.join(format!("{}.csv", report.id)), report.to_csv())?;
    }
    let code = if report.verdict == Verdict::Inconclusive { 3 } else { 0 };
    Ok(Outcome { doc: serde_json::to_value(&report)?, code })
}

fn render(a: &RenderArgs, cx: &Ctx) -> Result<Outcome> {
    let (cloud, fr, cell) = if let Some(path) = &a.cloud {
        let cloud = PointCloud::from_csv(&read(path)?, 0.0)?;
        let fr = frame_of(&cloud);
        (cloud, fr, 0.0)
    } else {
        let ifs = a.source.ifs()?;
        let cloud = match &a.tree {
            Some(path) => render_tree(&ifs, &FiniteTree::from_text(&read(path)?)?, None)?,
            None => render_full(&ifs, a.depth, None)?,
        };
        let fr = frame(&ifs);
        let cell = cell_side(&ifs, &cloud, fr);
        (cloud, fr, cell)
    };
    let path = target(&a.raster.render, &cx.out, "render.pgm")
        .ok_or_else(|| invalid("give --render PATH or --out DIR"))?;
    write(&path, raster(&cloud, fr, a.raster.size, cell)?)?;
    Ok(json!({ "points": cloud.len(), "eps": cloud.eps, "path": path.display().to_string() }).into())
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    let cx = Ctx { json: cli.json, seed: cli.seed, timing: cli.timing, out: cli.out.clone() };
    let start = Instant::now();
    let mut outcome = match &cli.command {
        Command::Simulate(a) => simulate(a, &cx),
        Command::Extinction(a) => extinction(a, &cx),
        Command::Moran(a) => moran(a),
        Command::Fixpoint(a) => fixpoint(a),
        Command::GkCurve(a) => gk_curve(a, &cx),
        Command::Extract(a) => extract(a, &cx),
        Command::DiffuseCert(a) => diffuse_cert(a),
        Command::CheckDiffuse(a) => check_diffuse(a, &cx),
        Command::CheckAhlfors(a) => check_ahlfors(a, &cx),
        Command::Boxdim(a) => boxdim(a),
        Command::Experiment(a) => experiment(a, &cx),
        Command::Render(a) => render(a, &cx),
    }?;
    if cx.timing && outcome.doc.is_object() && outcome.doc.get("runtime_secs").is_none() {
        outcome.doc["runtime_secs"] = json!(start.elapsed().as_secs_f64());
    }
    print(&outcome.doc, cx.json);
    Ok(outcome)
}

/// Render the document; a closed stdout (e.g. piped into `head`) is not an error.
fn print(doc: &Value, as_json: bool) {
    use std::io::Write;
    let text = if as_json {
        serde_json::to_string_pretty(doc).expect("serializable") + "\n"
    } else {
        human(doc)
    };
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn human(doc: &Value) -> String {
    let Value::Object(m) = doc else {
        return format!("{doc}\n");
    };
    let mut out = String::new();
    for (k, v) in m {
        let text = match v {
            Value::String(s) => s.clone(),
            other => {
                let s = other.to_string();
                if s.len() <= 100 {
                    s
                } else if let Value::Array(a) = other {
                    format!("[{} entries; use --json]", a.len())
                } else {
                    "{…; use --json}".to_string()
                }
            }
        };
        out.push_str(&format!("{k}: {text}\n"));
    }
    out
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Json(_) | Error::Capability(_) | Error::Io(_) => 2,
        Error::NotFound(_) | Error::Inconclusive(_) | Error::DegenerateSample(_) => 3,
        Error::ResourceLimit { .. } => 4,
    }
}

fn parse_cli(args: Vec<String>) -> std::result::Result<Cli, clap::Error> {
    let cmd = Cli::command().args_override_self(true).mut_subcommands(|s| s.args_override_self(true));
    let matches = cmd.try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match parse_cli(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(o) => ExitCode::from(o.code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
