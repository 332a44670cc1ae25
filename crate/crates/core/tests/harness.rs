use chemokit::config::parse_config;
use chemokit::experiments::{run_experiment, write_outputs};
use chemokit::output::{Snapshot, TIME_SERIES_HEADER};

#[test]
fn three_step_series_has_three_increasing_rows() {
    let spec = parse_config("[run]\nic = gaussian\nnx = 12\ndt = 0.05\nt_max = 0.15\n").unwrap();
    let report = run_experiment(&spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&report, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("n12.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TIME_SERIES_HEADER));
    let times: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(times.len(), 3);
    assert!(times.windows(2).all(|w| w[1] > w[0]));
    for line in text.lines().skip(1) {
        assert!(line.split(',').all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn snapshot_files_round_trip_exactly() {
    let spec = parse_config("[run]\nic = gaussian\namplitude = 3\nnx = 4\ndt = 0.1\nt_max = 0.2\nsnapshots = 0.1\n").unwrap();
    let report = run_experiment(&spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&report, dir.path()).unwrap();
    let snap = Snapshot::read(&dir.path().join("n4_rho_t0.1.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("n4_rho_t0.1.csv")).unwrap();
    assert_eq!(text.lines().count(), 4 + 4);
    let (_, expected) = report.runs[0].snapshots.iter().find(|(n, _)| n == "rho_t0.1").unwrap();
    assert_eq!(&snap, expected);
    assert!(snap.values.iter().zip(&expected.values).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn convergence_summary_slopes_match_emitted_errors() {
    let spec = parse_config("[convergence]\nmeshes = 10,20,40\nt_max = 1\nepsilon = 1\n").unwrap();
    let report = run_experiment(&spec, 2).unwrap();
    let table = report.tables.iter().find(|t| t.headers.iter().any(|h| h == "pairwise slope")).unwrap();
    assert_eq!(table.rows.len(), 3, "one row per mesh");
    let err = |k: usize| table.rows[k][5].parse::<f64>().unwrap();
    let h = |k: usize| table.rows[k][4].parse::<f64>().unwrap();
    let slope: f64 = table.rows[2][6].parse().unwrap();
    let recomputed = (err(2) / err(1)).ln() / (h(2) / h(1)).ln();
    assert!((slope - recomputed).abs() < 2e-3, "{slope} vs {recomputed}");
    assert_eq!(table.rows[0][5], "-");
}

#[test]
fn radial_blowup_peak_ratio_near_sixteen() {
    let spec = parse_config("[blowup_radial]\nmeshes = 80, 320\n").unwrap();
    let report = run_experiment(&spec, 2).unwrap();
    assert_eq!(report.failed_runs(), 0);
    let ratio = report.derived("peak ratio n320/n80").unwrap();
    assert!((16.0 * 0.7..=16.0 * 1.3).contains(&ratio), "{ratio}");
}

#[test]
fn threads_do_not_change_results() {
    let spec = parse_config("[two_species]\nmeshes = 20, 40\nt_max = 0.01\n").unwrap();
    let a = run_experiment(&spec, 1).unwrap();
    let b = run_experiment(&spec, 4).unwrap();
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.series[0].to_csv(), y.series[0].to_csv());
        assert_eq!(x.series[1].to_csv(), y.series[1].to_csv());
    }
}
