use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BENCHMARK: &str = r#"
horizon = 16.0
mu = 1.0
[lambda]
kind = "sinusoid"
a = 1.0
b = 0.6
[staffing]
kind = "constant"
value = 1.0
[patience]
kind = "h2_balanced"
mean = 2.0
scv = 4.0
"#;

const ZERO_RATE: &str = r#"
horizon = 4.0
mu = 1.0
[lambda]
kind = "constant"
value = 0.0
[staffing]
kind = "constant"
value = 1.0
[patience]
kind = "exponential"
rate = 0.5
"#;

// staffing drops faster than servers can drain: s μ + ṡ < 0 while overloaded
const INFEASIBLE: &str = r#"
horizon = 4.0
mu = 1.0
x0 = 1.0
[lambda]
kind = "constant"
value = 1.5
[staffing]
kind = "sinusoid"
a = 1.0
b = 0.5
c = 4.0
[patience]
kind = "exponential"
rate = 0.5
"#;

fn config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn tvq(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvq"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_arrival_rate_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "zero.toml", ZERO_RATE);
    let o = tvq(&["fluid"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("λ_inf > 0 fails"), "{}", stderr(&o));
}

#[test]
fn infeasible_staffing_has_its_own_code() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "inf.toml", INFEASIBLE);
    let o = tvq(&["variance"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("staffing infeasible"));
}

#[test]
fn config_errors() {
    let dir = TempDir::new().unwrap();
    let o = tvq(&["fluid"], &dir.path().join("missing.toml"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    let bad = config(&dir, "bad.toml", "horizon = 1.0\nmu = 1.0\nspeed = 3\n");
    assert_eq!(tvq(&["fluid"], &bad, dir.path()).status.code(), Some(2));
    let cfg = config(&dir, "b.toml", BENCHMARK);
    let o = tvq(&["fluid", "--grid-step", "0"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = tvq(&["simulate", "--n", "0.5", "--reps", "2"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analytic_outputs_have_documented_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "b.toml", BENCHMARK);
    for (args, file, header) in [
        (&["fluid"][..], "fluid.csv", "t,regime,X,B,Q,w,wdot,v,b0,qtilde_w,alpha,A,D"),
        (
            &["variance"][..],
            "variance.csv",
            "t,var_X,var_Xstar,var_W,var_Wstar,var_V,cov_XW,Fwc,var_X_lambda,var_X_s,var_X_a",
        ),
        (
            &["approx", "--n", "200"][..],
            "approx.csv",
            "t,mean_X,var_X,mean_Q,var_Q,mean_B,var_B,mean_W,var_W,mean_V,var_V,abandon_rate,staffing,regime",
        ),
    ] {
        let o = tvq(args, &cfg, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let text = fs::read_to_string(dir.path().join(file)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(header));
        assert_eq!(lines.count(), 16_001);
        assert!(text.ends_with('\n'));
    }
}

#[test]
fn variance_is_continuous_in_the_export() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "b.toml", BENCHMARK);
    assert!(tvq(&["variance"], &cfg, dir.path()).status.success());
    let text = fs::read_to_string(dir.path().join("variance.csv")).unwrap();
    let var_x: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let jump = var_x
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);
    // slope is O(1), so neighbouring grid values differ by O(Δ)
    assert!(jump < 5e-3, "{jump}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "b.toml", BENCHMARK);
    let runs: [(&[&str], &str); 4] = [
        (&["fluid"], "fluid.csv"),
        (&["variance"], "variance.csv"),
        (&["approx", "--n", "100"], "approx.csv"),
        (
            &["simulate", "--n", "50", "--reps", "30", "--seed", "9"],
            "sim.csv",
        ),
    ];
    for (args, file) in runs {
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        assert!(tvq(args, &cfg, &a).status.success());
        assert!(tvq(args, &cfg, &b).status.success());
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn compare_is_independent_of_parallelism() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "b.toml", BENCHMARK);
    let base = [
        "compare",
        "--n",
        "50",
        "--reps",
        "40",
        "--tol-mean",
        "1",
        "--tol-var",
        "10",
        "--tol-wait",
        "10",
    ];
    let one = dir.path().join("one");
    let four = dir.path().join("four");
    let o = tvq(&[&base[..], &["--parallel", "1"]].concat(), &cfg, &one);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        tvq(&[&base[..], &["--parallel", "4"]].concat(), &cfg, &four)
            .status
            .success()
    );
    for f in ["compare.csv", "summary.txt"] {
        assert_eq!(
            fs::read(one.join(f)).unwrap(),
            fs::read(four.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn failed_tolerance_exits_with_acceptance_code() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "b.toml", BENCHMARK);
    let o = tvq(
        &["compare", "--n", "50", "--reps", "20", "--tol-mean", "0"],
        &cfg,
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(5));
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("FAIL mean_X_sup_rel_err"));
    assert!(summary.ends_with("overall FAIL\n"));
}

#[test]
fn desk_scale_compare_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "b.toml", BENCHMARK);
    let o = tvq(
        &["compare", "--n", "200", "--reps", "400", "--parallel", "4"],
        &cfg,
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let rows = fs::read_to_string(dir.path().join("compare.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 322);
}
