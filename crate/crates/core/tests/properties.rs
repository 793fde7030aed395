use polymer_core::ar1::{rate_function, tail_probe, Ar1Params};
use polymer_core::config::{Overrides, StudyConfig};
use polymer_core::dynamics::{pinned_string, read_trajectory_binary, write_trajectory_binary};
use polymer_core::experiments::{
    oracle_equivalence_error, run_scaling_study, run_validation_suite, CheckStatus,
    ValidationOptions,
};
use polymer_core::increments::increment_mean_and_variance;
use polymer_core::report::{emit_report, Cell, Format, Table};
use polymer_core::rng::derive_seed;
use polymer_core::spectral::build_basis;
use polymer_core::{Convention, PolymerModel};
use rayon::prelude::*;

const PAIRS: [(usize, usize); 3] = [(0, 1), (1, 3), (0, 2)];

fn increments_at(seed: u64, t: usize) -> Vec<f64> {
    let basis = build_basis(4).unwrap();
    let s = pinned_string(&basis, 0, 0, 5, 1e-10, seed, Convention::Literal).unwrap();
    PAIRS.iter().map(|&(a, b)| s.increment(t, a, b)).collect()
}

/// Sample mean of the product of two coordinates and its standard error.
fn product_moment(xs: &[Vec<f64>], a: usize, b: usize) -> (f64, f64) {
    let prods: Vec<f64> = xs.iter().map(|x| x[a] * x[b]).collect();
    let n = prods.len() as f64;
    let m = prods.iter().sum::<f64>() / n;
    let v = prods.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn pinned_increment_covariance_is_shift_invariant() {
    let n = 100_000u64;
    let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(77, i);
            (increments_at(seed, 0), increments_at(seed, 5))
        })
        .collect();
    let (early, late): (Vec<_>, Vec<_>) = draws.into_iter().unzip();
    for a in 0..PAIRS.len() {
        for b in a..PAIRS.len() {
            let (c0, s0) = product_moment(&early, a, b);
            let (c1, s1) = product_moment(&late, a, b);
            let z = (c0 - c1).abs() / (s0 * s0 + s1 * s1).sqrt();
            assert!(z < 4.0, "cov({a},{b}) at t=0 {c0} vs t=5 {c1}, z={z}");
        }
    }
}

#[test]
fn paper_variance_roughly_doubles_with_chain_length() {
    let (small, large) = (build_basis(16).unwrap(), build_basis(32).unwrap());
    for d in [1usize, 2, 4] {
        let v16 = increment_mean_and_variance(&small, 0, d, Convention::Paper).unwrap().variance;
        let v32 = increment_mean_and_variance(&large, 0, d, Convention::Paper).unwrap().variance;
        let ratio = v32 / v16;
        assert!((ratio - 2.0).abs() <= 0.5, "d={d}: ratio {ratio}");
    }
}

#[test]
fn tail_rate_moves_toward_limit_as_horizon_doubles() {
    let params = Ar1Params::unit(0.0);
    let limit = rate_function(params, 2.0).unwrap();
    let short = tail_probe(params, 10, 2.0, 1 << 20, 3).unwrap();
    let long = tail_probe(params, 20, 2.0, 1 << 20, 4).unwrap();
    assert!(!short.underpowered && !long.underpowered);
    let gap_short = (short.empirical_rate - limit).abs();
    let gap_long = (long.empirical_rate - limit).abs();
    assert!(gap_long < gap_short, "T=10 gap {gap_short}, T=20 gap {gap_long}");
}

#[test]
fn binary_dump_round_trips() {
    let model = PolymerModel::new(6, 9).with_convention(Convention::Paper);
    let traj = model.sample(12, 0.25).unwrap();
    let mut buf = Vec::new();
    write_trajectory_binary(&traj, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"DSHP");
    let back = read_trajectory_binary(buf.as_slice()).unwrap();
    assert_eq!(back.values(), traj.values());
    assert_eq!(back.seed(), traj.seed());
    assert_eq!(back.convention(), Convention::Paper);
}

#[test]
fn emitted_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = Table::new(&["J", "value", "label"]);
    table.push(vec![Cell::from(8usize), Cell::from(0.1 + 0.2), Cell::from("a")]).unwrap();
    table.push(vec![Cell::from(16usize), Cell::from(-1.5e-9), Cell::from("b")]).unwrap();
    for format in [Format::Csv, Format::Jsonl] {
        let p1 = dir.path().join("first");
        let p2 = dir.path().join("second");
        emit_report(&table, format, &p1).unwrap();
        emit_report(&table, format, &p2).unwrap();
        let (a, b) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, table.to_bytes(format));
    }
    let jsonl = String::from_utf8(table.to_bytes(Format::Jsonl)).unwrap();
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["J"], 8);
    assert!(jsonl.lines().next().unwrap().starts_with("{\"J\":8,\"value\":"));
}

#[test]
fn scaling_study_output_is_reproducible() {
    let text = "J = [4, 6, 8]\nT = 16\nepsilon = 0.5\nbeta = 0.05\nreplicates = 64\nseed = 9\n";
    let cfg = StudyConfig::from_toml_str(text, &Overrides::default()).unwrap();
    let a = run_scaling_study(&cfg).unwrap().to_table().to_bytes(Format::Csv);
    let b = run_scaling_study(&cfg).unwrap().to_table().to_bytes(Format::Csv);
    assert_eq!(a, b);
}

#[test]
fn validation_suite_has_no_failures() {
    let report = run_validation_suite(&ValidationOptions::default());
    let failures: Vec<_> = report.failures().iter().map(|o| format!("{}: {}", o.name, o.detail)).collect();
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(report.outcomes.iter().any(|o| o.status == CheckStatus::Discrepancy));
}

#[test]
fn shifted_kernel_is_caught() {
    assert!(oracle_equivalence_error(0, 21).unwrap() < 1e-9);
    assert!(oracle_equivalence_error(1, 21).unwrap() > 1e-3);
}
