use gwfract::branching::OffspringDistribution;
use gwfract::error::Error;
use gwfract::extraction::{
    general_pipeline, percolation_pipeline, GeneralParams, PercolationParams, PercolationWitness, ScanOptions,
};
use gwfract::geometry::{SimilarityIfs, SimilarityMap};
use gwfract::ExtractedSubset;

fn perc(p: f64, c: f64, witness: PercolationWitness) -> PercolationParams {
    PercolationParams { b: 3, d: 2, p, c, k: None, witness }
}

const SECTION: PercolationWitness = PercolationWitness::SectionDiffuse { c: 0.05 };

#[test]
fn general_pipeline_reproduces_percolation_on_the_grid() {
    let opts = ScanOptions::default();
    let a = percolation_pipeline(&perc(0.7, 3.0, SECTION), &opts, 11).unwrap();
    let ifs = SimilarityIfs::percolation(3, 2).unwrap();
    let off = OffspringDistribution::binomial(9, 0.7).unwrap();
    let params = GeneralParams { rho: 3f64.powi(-4), alpha: 1.0, c: Some(0.05) };
    let b = general_pipeline(&ifs, &off, &params, &opts, 11).unwrap();
    assert_eq!(a.root, b.root);
    assert_eq!(a.tree, b.tree);
    assert_eq!(a.certificates.arity, 81);
}

#[test]
fn extraction_is_deterministic() {
    let opts = ScanOptions { levels: Some(2), ..ScanOptions::default() };
    let a = percolation_pipeline(&perc(0.7, 4.0, SECTION), &opts, 5).unwrap();
    let b = percolation_pipeline(&perc(0.7, 4.0, SECTION), &opts, 5).unwrap();
    assert_eq!(a.tree.to_text(), b.tree.to_text());
    assert_eq!(a.cloud.to_csv(), b.cloud.to_csv());
    assert_eq!(a.summary_json(), b.summary_json());
}

#[test]
fn block_witness_mode_extracts_complete_blocks() {
    let opts = ScanOptions { levels: Some(1), ..ScanOptions::default() };
    let sub = percolation_pipeline(&perc(0.9, 3.0, PercolationWitness::Block), &opts, 2).unwrap();
    assert_eq!(sub.tree.children(0).len(), 81);
    assert!(sub.certificates.c_w > 0.0);
}

#[test]
fn measure_csv_sums_to_one_per_height() {
    let opts = ScanOptions { levels: Some(2), ..ScanOptions::default() };
    let sub = percolation_pipeline(&perc(0.7, 4.0, SECTION), &opts, 8).unwrap();
    let csv = sub.measure_csv();
    let mut sums = [0.0f64; 3];
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        sums[f[1].parse::<usize>().unwrap()] += f[2].parse::<f64>().unwrap();
    }
    for s in sums {
        assert!((s - 1.0).abs() < 1e-9);
    }
    let json = sub.summary_json();
    assert_eq!(json["certificates"]["arity"], 256);
    assert_eq!(json["leaves"], 65536);
}

#[test]
fn hopeless_scan_reports_not_found_with_prediction() {
    let opts = ScanOptions { levels: Some(3), max_vertices: 2, max_vertex_level: 0, ..ScanOptions::default() };
    match percolation_pipeline(&perc(0.6, 5.0, SECTION), &opts, 1) {
        Err(Error::NotFound(msg)) => assert!(msg.contains("predicted"), "{msg}"),
        other => panic!("expected not-found, got {:?}", other.map(|s| s.root)),
    }
}

#[test]
fn invalid_percolation_parameters_are_rejected() {
    let opts = ScanOptions::default();
    assert!(matches!(percolation_pipeline(&perc(0.6, 6.0, SECTION), &opts, 1), Err(Error::InvalidInput(_))));
    assert!(matches!(percolation_pipeline(&perc(0.1, 2.0, SECTION), &opts, 1), Err(Error::InvalidInput(_))));
    let bad_k = PercolationParams { k: Some(2), ..perc(0.7, 2.0, SECTION) };
    assert!(matches!(percolation_pipeline(&bad_k, &opts, 1), Err(Error::InvalidInput(_))));
}

#[test]
fn general_pipeline_validates_inputs() {
    let ifs = SimilarityIfs::sierpinski();
    let off = OffspringDistribution::binomial(3, 0.9).unwrap();
    let opts = ScanOptions::default();
    // ρ^(−α) = 2 is below the minimal arity 81 for this IFS.
    let small = GeneralParams { rho: 0.25, alpha: 0.5, c: None };
    assert!(matches!(general_pipeline(&ifs, &off, &small, &opts, 1), Err(Error::InvalidInput(_))));
    // α above the dimension.
    let big = GeneralParams { rho: 1.0 / 64.0, alpha: 1.5, c: None };
    assert!(matches!(general_pipeline(&ifs, &off, &big, &opts, 1), Err(Error::InvalidInput(_))));
    // Non-integer arity.
    let frac = GeneralParams { rho: 1.0 / 64.0, alpha: 1.05, c: None };
    assert!(matches!(general_pipeline(&ifs, &off, &frac, &opts, 1), Err(Error::InvalidInput(_))));
}

#[test]
fn planar_attractors_are_rejected() {
    let maps = (0..3)
        .map(|i| SimilarityMap::planar(1.0 / 3.0, 0.0, [f64::from(i) / 3.0, 0.0]).unwrap())
        .collect();
    let ifs = SimilarityIfs::new(2, maps, None).unwrap();
    let off = OffspringDistribution::binomial(3, 0.95).unwrap();
    let params = GeneralParams { rho: 3f64.powi(-8), alpha: 0.5, c: None };
    match general_pipeline(&ifs, &off, &params, &ScanOptions::default(), 1) {
        Err(Error::InvalidInput(msg)) => assert!(msg.contains("planar"), "{msg}"),
        other => panic!("expected rejection, got {:?}", other.map(|s| s.root)),
    }
}

#[test]
fn sierpinski_extraction_certifies_diffuseness() {
    let ifs = SimilarityIfs::sierpinski();
    let off = OffspringDistribution::binomial(3, 0.9).unwrap();
    let params = GeneralParams { rho: 1.0 / 64.0, alpha: 81f64.ln() / 64f64.ln(), c: None };
    let opts = ScanOptions { levels: Some(2), ..ScanOptions::default() };
    let sub = general_pipeline(&ifs, &off, &params, &opts, 4).unwrap();
    assert_eq!(sub.cloud.len(), 81 * 81);
    let chk = gwfract::geometry::empirical_diffuse_check(&sub.cloud, sub.certificates.beta, &sub.diffuse_scales(), 40, 4).unwrap();
    assert_eq!(chk.failures, 0);
}

#[test]
fn saved_subsets_load_back_identically() {
    let ifs = SimilarityIfs::sierpinski();
    let off = OffspringDistribution::binomial(3, 0.9).unwrap();
    let params = GeneralParams { rho: 1.0 / 64.0, alpha: 81f64.ln() / 64f64.ln(), c: None };
    let opts = ScanOptions { levels: Some(1), ..ScanOptions::default() };
    let sub = general_pipeline(&ifs, &off, &params, &opts, 9).unwrap();
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("saved_subset");
    sub.save(&dir).unwrap();
    let back = ExtractedSubset::load(&dir).unwrap();
    assert_eq!(back.root, sub.root);
    assert_eq!(back.tree, sub.tree);
    assert_eq!(back.summary_json(), sub.summary_json());
    assert_eq!(back.measure_csv(), sub.measure_csv());
    assert_eq!(back.cloud.len(), sub.cloud.len());
    for (a, b) in back.cloud.points.iter().zip(&sub.cloud.points) {
        assert!((a - b).norm() <= 1e-12);
    }
    assert!(ExtractedSubset::load(&dir.join("missing")).is_err());
}
