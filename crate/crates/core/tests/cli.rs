use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_SPECTRUM: &str = "[grid]\nn = 8\n[medium]\ndiagonal = 1, 2\n[spectrum]\nt_max = 5\nsamples = 11\n";

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("scenario.ini");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_bfflow"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn passing_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["spectrum", "--svg", "--threads", "1"], SMALL_SPECTRUM);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("check.symmetry = PASS"), "{stdout}");
    let out = dir.path().join("out");
    for f in ["spectrum.csv", "decay.csv", "summary.txt", "spectrum.svg", "decay.svg"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("decay.csv")).unwrap();
    assert!(csv.starts_with("delta,fitted_rate,r_squared\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn failed_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL_SPECTRUM}[thresholds]\nsymmetry_defect = -1\n");
    let o = run(dir.path(), &["spectrum"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("result = FAIL"));
}

#[test]
fn runtime_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // Explicit step far above the stability limit of the explicit scheme.
    let o = run(dir.path(), &["simulate"], "[grid]\nn = 8\n[solver]\nscheme = rk4\ndt = 0.5\n[energy]\neps = 0\n");
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate"], "[nonlinearity]\nl = 3.0\n");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("(0, 2]"), "{}", stderr(&o));

    let o = run(dir.path(), &["simulate"], "[grid]\nn = 8\n\n[solver]\ndtt = 0.1\n");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));

    let missing = Command::new(env!("CARGO_BIN_EXE_bfflow"))
        .args(["oracle", "--config", "/nonexistent/x.ini"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn forcing_file_is_read_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<String> = (0..2 * 64).map(|i| format!("{}", (i % 7) as f64 * 0.1)).collect();
    fs::write(dir.path().join("g.txt"), format!("# forcing\n{}\n", values.join(", "))).unwrap();
    let cfg = "[grid]\nn = 8\n[forcing]\nkind = file\npath = g.txt\n[run]\nt_max = 0.02\nsample_every = 0.01\n[energy]\neps = 0\n";
    let o = run(dir.path(), &["simulate"], cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    fs::write(dir.path().join("g.txt"), "1 2 3\n").unwrap();
    let o = run(dir.path(), &["simulate"], cfg);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("grid needs 128"), "{}", stderr(&o));
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[grid]\nn = 8\n[run]\nt_max = 0.05\nsample_every = 0.01\n[initial]\namplitudes = 1, 2\n[energy]\neps = 0.05\n";
    let read = |sub: &str| fs::read(dir.path().join("out").join(sub)).unwrap();
    assert_eq!(run(dir.path(), &["simulate", "--seed", "3"], cfg).status.code(), Some(0));
    let a = read("energies.csv");
    assert_eq!(run(dir.path(), &["simulate", "--seed", "3"], cfg).status.code(), Some(0));
    assert_eq!(a, read("energies.csv"));
    assert_eq!(run(dir.path(), &["simulate", "--seed", "4"], cfg).status.code(), Some(0));
    assert_ne!(a, read("energies.csv"));
}
