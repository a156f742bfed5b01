use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use diffbridge::harness::{self, csv, ExperimentConfig};

fn diffbridge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffbridge"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_writes_paths_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffbridge(&["simulate", "--paths", "5", "--h", "0.01", "--proposal", "guided"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ESS"));
    let paths = csv::read_paths(BufReader::new(File::open(dir.path().join("guided_paths.csv")).unwrap())).unwrap();
    let weights = csv::read_weights(BufReader::new(File::open(dir.path().join("guided_weights.csv")).unwrap())).unwrap();
    assert_eq!(paths.len(), 5);
    assert_eq!(weights.len(), 5);
    for (_, p) in &paths {
        assert_eq!(p.state(0)[0], 0.1);
        assert_eq!(p.last()[0], 1.0);
    }
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("example3.cfg");
    fs::write(&cfg, "model = ou-sine\nproposal = residual\npaths = 3\nh = 0.5\n").unwrap();
    let o = diffbridge(&["simulate", "--config", cfg.to_str().unwrap(), "--paths", "2", "--h", "0.01"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let paths = csv::read_paths(BufReader::new(File::open(dir.path().join("residual_paths.csv")).unwrap())).unwrap();
    assert_eq!(paths.len(), 2);
    assert_eq!(paths[0].1.len(), 501);
    assert_eq!(paths[0].1.state(0)[0], 5.0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["simulate", "--paths", "0"],
        vec!["simulate", "--h", "-0.1"],
        vec!["simulate", "--paths", "1", "--aux", "lna", "--sigma-policy", "interpolate"],
        vec!["simulate", "--proposal", "nonsense"],
        vec!["compare", "--proposal", "guided"],
        vec!["mh", "--iterations", "0"],
        vec!["figure", "lorenz"],
        vec!["simulate", "--threads", "0"],
        vec!["frobnicate"],
    ] {
        let o = diffbridge(&args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn numerical_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // zero dispersion is caught by validation
    let o = diffbridge(&["simulate", "--set", "sigma=0", "--paths", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    // an endpoint tolerance the rejection sampler cannot meet
    let o = diffbridge(&["compare", "--model", "ou-sine", "--proposal", "guided,residual", "--paths", "2", "--h", "0.01", "--set", "eps=1e-9"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("larger endpoint tolerance"));
}

#[test]
fn compare_mh_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffbridge(
        &["compare", "--proposal", "guided,residual", "--paths", "200", "--h", "0.01", "--threads", "1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = csv::Table::read(BufReader::new(File::open(dir.path().join("compare.csv")).unwrap())).unwrap();
    assert_eq!(table.rows.len(), 3);
    let guided = table.get("guided(simple51)", "unweighted_sup_distance").unwrap();
    let residual = table.get("residual", "unweighted_sup_distance").unwrap();
    assert!(guided < residual);

    let o = diffbridge(&["mh", "--iterations", "300", "--h", "0.01"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("acceptance rate"));
    let trace = csv::Table::read(BufReader::new(File::open(dir.path().join("mh_trace.csv")).unwrap())).unwrap();
    assert_eq!(trace.rows.len(), 300);

    let o = diffbridge(&["tables", "--aux", "lna", "--h", "0.1"], dir.path());
    assert!(o.status.success());
    let text = fs::read_to_string(dir.path().join("tables.csv")).unwrap();
    assert!(text.starts_with("t,K_00,v_0\n"));
    assert_eq!(text.lines().count(), 32);
}

#[test]
fn figure_ou_is_deterministic_and_structured() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let o = diffbridge(&["figure", "ou", "--seed", "11"], dir.path());
        assert!(o.status.success());
    }
    for name in ["figure_ou.svg", "ou_flow.csv", "ou_true.csv", "ou_guided.csv", "ou_residual.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let svg = fs::read_to_string(a.path().join("figure_ou.svg")).unwrap();
    assert!(svg.contains(r#"width="600" height="400""#));

    // a coarser grid keeps the layout
    let c = tempfile::tempdir().unwrap();
    assert!(diffbridge(&["figure", "ou", "--seed", "11", "--h", "0.01"], c.path()).status.success());
    let coarse = fs::read_to_string(c.path().join("figure_ou.svg")).unwrap();
    assert_eq!(coarse.matches("<polyline").count(), svg.matches("<polyline").count());
    let guided = csv::read_paths(BufReader::new(File::open(c.path().join("ou_guided.csv")).unwrap())).unwrap();
    assert_eq!((guided.len(), guided[0].1.len()), (5, 301));
}

#[test]
fn runners_are_thread_count_invariant() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, threads) in dirs.iter().zip([1, 3]) {
        let mut c = ExperimentConfig::parse("model = sine\nproposal = guided, delyon-hu-1\npaths = 12\nh = 0.01").unwrap();
        c.out = dir.path().to_path_buf();
        harness::with_threads(Some(threads), || harness::run_simulate(&c)).unwrap().unwrap();
    }
    for name in ["guided_paths.csv", "guided_weights.csv", "delyon-hu-1_weights.csv"] {
        assert_eq!(
            fs::read(dirs[0].path().join(name)).unwrap(),
            fs::read(dirs[1].path().join(name)).unwrap()
        );
    }
}
