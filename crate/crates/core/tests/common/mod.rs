//! Property checks shared by the `properties` test target and the acceptance
//! harness. Each check runs its own proptest runner and reports the first
//! minimal counterexample as an error string.

#![allow(dead_code)]

use gwfract::branching::{
    extinction_frequency, sample_gw, thin, OffspringDistribution,
};
use gwfract::extraction::{percolation_pipeline, PercolationParams, PercolationWitness, ScanOptions};
use gwfract::fixpoint::{g_k_a_monte_carlo, MonotoneCollection};
use gwfract::geometry::{width_of, Point};
use gwfract::rng::trial_rng;
use gwfract::symbolic::{le_tol, pi_section, rho_index, section_pi_rho, validate_section, Weights};
use nalgebra::{Rotation3, Unit, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub type Check = fn() -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    ("section exact cover", section_exact_cover),
    ("next-element equivalence", next_element_equivalence),
    ("monotone closure laws", monotone_closure_laws),
    ("thinning composition", thinning_composition),
    ("width isometry and scaling", width_invariance),
    ("seed determinism across thread counts", thread_determinism),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config { cases, failure_persistence: None, ..Config::default() },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn report<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

fn weights_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.15f64..0.7, 2..=4)
}

fn in_section(w: &Weights, word: &[u32], t: f64) -> bool {
    !word.is_empty() && le_tol(w.ratio(word), t) && !le_tol(w.ratio(&word[..word.len() - 1]), t)
}

pub fn section_exact_cover() -> Result<(), String> {
    let strat = (weights_strategy(), 0.2f64..=1.0, prop::collection::vec(0u32..4, 80));
    report(runner(300).run(&strat, |(r, frac, tail)| {
        let w = Weights::new(r).unwrap();
        let rho = frac * w.r_min();
        let sec = section_pi_rho(&w, rho, 1 << 20).unwrap();
        let n = w.len() as u32;
        prop_assert!(validate_section(n, sec.words()).unwrap());
        for word in sec.words() {
            let ri = w.ratio(word);
            prop_assert!(le_tol(ri, rho));
            prop_assert!(ri > rho * w.r_min() * (1.0 - 1e-12));
        }
        // A long word has exactly one prefix in the section.
        let word: Vec<u32> = tail.into_iter().map(|l| l % n).collect();
        let hits = (1..=word.len()).filter(|&k| sec.contains(&word[..k])).count();
        prop_assert_eq!(hits, 1);
        Ok(())
    }))
}

pub fn next_element_equivalence() -> Result<(), String> {
    let strat = (
        weights_strategy(),
        0.3f64..=1.0,
        1usize..=2,
        0usize..10_000,
        1i32..=3,
        prop::collection::vec(0u32..4, 1..=6),
    );
    report(runner(1000).run(&strat, |(r, frac, n, pick, m, j)| {
        let w = Weights::new(r).unwrap();
        let rho = frac * w.r_min();
        let sec = pi_section(&w, rho.powi(n as i32), 1 << 20).unwrap();
        let i = &sec.words()[pick % sec.len()];
        let (n_i, a) = rho_index(&w, rho, i).unwrap();
        prop_assert_eq!(n_i, n);
        prop_assert!(a > w.r_min() * (1.0 - 1e-12) && le_tol(a, 1.0));
        let letters = w.len() as u32;
        let j: Vec<u32> = j.into_iter().map(|l| l % letters).collect();
        let mut ij = i.to_vec();
        ij.extend_from_slice(&j);
        let lhs = in_section(&w, &ij, rho.powi(n as i32 + m));
        let rhs = in_section(&w, &j, rho.powi(m) / a);
        prop_assert_eq!(lhs, rhs, "i = {:?}, j = {:?}", i, j);
        Ok(())
    }))
}

pub fn monotone_closure_laws() -> Result<(), String> {
    let set = || prop::collection::vec(0u32..6, 0..6);
    let strat = (prop::collection::vec(set(), 1..4), set(), set(), 1usize..5);
    report(runner(300).run(&strat, |(gens, a, extra, k)| {
        let coll = MonotoneCollection::generators(gens.clone());
        for g in &gens {
            prop_assert!(coll.closure_member(g));
        }
        let mut union = a.clone();
        union.extend_from_slice(&extra);
        if coll.closure_member(&a) {
            prop_assert!(coll.closure_member(&union));
        }
        let ary = MonotoneCollection::Ary(k);
        let mut distinct = a.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert_eq!(ary.closure_member(&a), distinct.len() >= k);
        prop_assert!(coll.find_monotonicity_violation(6, 50, 1).is_none());
        Ok(())
    }))
}

pub fn thinning_composition() -> Result<(), String> {
    let strat = (5usize..40, 0.0f64..1.0, 0.0f64..1.0, any::<u64>());
    report(runner(24).run(&strat, |(len, s, t, seed)| {
        let set: Vec<u32> = (0..len as u32).collect();
        let mut rng = trial_rng(seed, 0);
        prop_assert_eq!(thin(&set, 0.0, &mut rng), set.clone());
        prop_assert!(thin(&set, 1.0, &mut rng).is_empty());
        let trials = 4000;
        let total: usize = (0..trials)
            .map(|_| {
                let once = thin(&set, s, &mut rng);
                thin(&once, t, &mut rng).len()
            })
            .sum();
        let keep = (1.0 - s) * (1.0 - t);
        let mean = total as f64 / trials as f64;
        let sigma = (len as f64 * keep * (1.0 - keep) / trials as f64).sqrt();
        prop_assert!((mean - len as f64 * keep).abs() <= 4.0 * sigma + 1e-9, "mean {} vs {}", mean, len as f64 * keep);
        Ok(())
    }))
}

pub fn width_invariance() -> Result<(), String> {
    let pt = || prop::array::uniform3(-1.0f64..1.0);
    let strat = (
        prop::bool::ANY,
        prop::collection::vec(pt(), 4..30),
        0.1f64..5.0,
        pt(),
        0.0f64..std::f64::consts::TAU,
        pt(),
    );
    report(runner(200).run(&strat, |(planar, raw, scale, axis, angle, shift)| {
        let d = if planar { 2 } else { 3 };
        let pts: Vec<Point> = raw
            .iter()
            .map(|p| Vector3::new(p[0], p[1], if planar { 0.0 } else { p[2] }))
            .collect();
        let rot = if planar {
            Rotation3::from_axis_angle(&Vector3::z_axis(), angle)
        } else {
            let ax = Vector3::new(axis[0], axis[1], axis[2] + 2.0);
            Rotation3::from_axis_angle(&Unit::new_normalize(ax), angle)
        };
        let t = Vector3::new(shift[0], shift[1], if planar { 0.0 } else { shift[2] });
        let moved: Vec<Point> = pts.iter().map(|p| rot * p * scale + t).collect();
        let a = width_of(d, &pts);
        let b = width_of(d, &moved);
        let tol = scale * a.tolerance + b.tolerance + 1e-9 * (1.0 + scale);
        prop_assert!((b.width - scale * a.width).abs() <= tol, "{} vs {}", b.width, scale * a.width);
        Ok(())
    }))
}

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

pub fn thread_determinism() -> Result<(), String> {
    let off = OffspringDistribution::binomial(9, 0.6).unwrap();
    let run = || {
        let tree = sample_gw(&off, 4, 17).unwrap().tree.to_text();
        let ext = extinction_frequency(&off, 10, 4000, 5);
        let g = g_k_a_monte_carlo(&off, 3, 8, 0.5, 4000, 9);
        let params = PercolationParams {
            b: 3,
            d: 2,
            p: 0.7,
            c: 4.0,
            k: None,
            witness: PercolationWitness::SectionDiffuse { c: 0.05 },
        };
        let opts = ScanOptions { levels: Some(1), ..ScanOptions::default() };
        let sub = percolation_pipeline(&params, &opts, 3).unwrap();
        (tree, ext.hits, g.hits, sub.tree.to_text())
    };
    let one = with_threads(1, run);
    for n in [2, 4] {
        if with_threads(n, run) != one {
            return Err(format!("results differ between 1 and {n} threads"));
        }
    }
    Ok(())
}
