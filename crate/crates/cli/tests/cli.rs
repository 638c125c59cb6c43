use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stackleq::problem::{presets, Kernel};

fn stackleq(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackleq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("STACKLEQ_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&stackleq(&["--help"], tmp.path())), 0);
    assert_eq!(code(&stackleq(&["frobnicate"], tmp.path())), 2);
    assert_eq!(code(&stackleq(&["solve"], tmp.path())), 2);
    assert_eq!(code(&stackleq(&["solve", "--preset", "case1", "--dt", "abc"], tmp.path())), 2);
}

#[test]
fn invalid_problems_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = stackleq(&["validate", "--preset", "case9"], tmp.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("case9"));

    // Horizon 2.1 is not a multiple of 0.04.
    assert_eq!(code(&stackleq(&["solve", "--preset", "case1", "--dt", "0.04"], tmp.path())), 3);

    let bad_json = tmp.path().join("bad.json");
    fs::write(&bad_json, "{ not json").unwrap();
    let o = stackleq(&["validate", "--problem", bad_json.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 3);

    let mut spec = presets::case1();
    spec.costs.r2 = Kernel::scalar(-1.0);
    let neg = tmp.path().join("neg.json");
    fs::write(&neg, spec.to_json()).unwrap();
    let o = stackleq(&["solve", "--problem", neg.to_str().unwrap(), "--dt", "1e-2"], tmp.path());
    assert_eq!(code(&o), 3);
    let report = fs::read_to_string(tmp.path().join("validation.json")).unwrap();
    assert!(report.contains("\"passed\": false"));
}

#[test]
fn solver_failure_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = stackleq(&["solve", "--preset", "case1", "--dt", "0.175"], tmp.path());
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("leader"));
}

#[test]
fn unwritable_output_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("occupied");
    fs::write(&file, "").unwrap();
    assert_eq!(code(&stackleq(&["solve", "--preset", "case1", "--dt", "1e-2"], &file)), 1);
}

#[test]
fn problem_file_matches_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let file = tmp.path().join("case2.json");
    fs::write(&file, presets::case2().to_json()).unwrap();
    assert_eq!(code(&stackleq(&["gains", "--preset", "case2", "--dt", "1e-2"], &a)), 0);
    assert_eq!(code(&stackleq(&["gains", "--problem", file.to_str().unwrap(), "--dt", "1e-2"], &b)), 0);
    assert_eq!(fs::read(a.join("gains.csv")).unwrap(), fs::read(b.join("gains.csv")).unwrap());
}

#[test]
fn solve_outputs_full_and_reduced() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let red = tmp.path().join("red");
    assert_eq!(code(&stackleq(&["solve", "--preset", "case2", "--dt", "1e-2"], &full)), 0);
    let o = stackleq(&["solve", "--preset", "case2", "--dt", "1e-2", "--reduced-memory"], &red);
    assert_eq!(code(&o), 0);
    for name in ["follower_P", "follower_Z", "follower_Phat", "leader_P", "leader_Z", "leader_Phat"] {
        assert!(full.join(format!("{name}.csv")).exists(), "{name}");
        assert!(!red.join(format!("{name}.csv")).exists(), "{name}");
        assert_eq!(
            fs::read(full.join(format!("{name}_diag.csv"))).unwrap(),
            fs::read(red.join(format!("{name}_diag.csv"))).unwrap()
        );
    }
    let status: serde_json::Value = serde_json::from_slice(&fs::read(full.join("status.json")).unwrap()).unwrap();
    assert_eq!(status["solved"], true);
    assert_eq!(fs::read(full.join("gains.csv")).unwrap(), fs::read(red.join("gains.csv")).unwrap());

    // One row per pair j <= k over 151 nodes.
    let rows = fs::read_to_string(full.join("follower_P.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 151 * 152 / 2);
}

#[test]
fn env_var_overrides_out() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("env");
    let flag_dir = tmp.path().join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_stackleq"))
        .args(["gains", "--preset", "case1", "--dt", "1e-2", "--out"])
        .arg(&flag_dir)
        .env("STACKLEQ_OUT", &env_dir)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(env_dir.join("gains.csv").exists());
    assert!(!flag_dir.exists());
}

#[test]
fn simulate_writes_summary_and_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["simulate", "--preset", "case1", "--dt", "1e-2", "--paths", "40", "--export-paths"];
    assert_eq!(code(&stackleq(&args, tmp.path())), 0);
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("quantity,mean,sd,se\nJ1,"));
    let paths = fs::read_to_string(tmp.path().join("paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 1 + 40 * 211);
}

#[test]
fn export_plot_is_gnuplot_ready() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&stackleq(&["export-plot", "--preset", "case1", "--dt", "1e-2"], tmp.path())), 0);
    let plot = tmp.path().join("plot");
    // 1x1 follower fields, 2x2 leader fields, two series each.
    assert_eq!(read_dir_sorted(&plot).len(), 2 * 2 + 2 * 4 * 2);
    let text = fs::read_to_string(plot.join("follower_P_11_diag.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with('#'));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first.len(), 2);
    assert_eq!(first[0], 0.1);
}

#[test]
fn pipelines_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 3] = [
        &["solve", "--preset", "case2", "--dt", "1e-2"],
        &["simulate", "--preset", "case2", "--dt", "1e-2", "--paths", "60", "--export-paths"],
        &["verify", "--preset", "case2", "--dt", "5e-3", "--paths", "200", "--epsilons", "0.2,0.1,0.05"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let a = tmp.path().join(format!("{i}a"));
        let b = tmp.path().join(format!("{i}b"));
        let ca = code(&stackleq(args, &a));
        assert_eq!(ca, code(&stackleq(args, &b)));
        assert!(ca == 0 || ca == 5, "{args:?} exited {ca}");
        assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b), "{args:?}");
    }
}

#[test]
fn threads_flag_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ["simulate", "--preset", "case1", "--dt", "1e-2", "--paths", "80"];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&stackleq(&base, &a)), 0);
    let mut threaded = base.to_vec();
    threaded.extend(["--threads", "3"]);
    assert_eq!(code(&stackleq(&threaded, &b)), 0);
    assert_eq!(fs::read(a.join("summary.csv")).unwrap(), fs::read(b.join("summary.csv")).unwrap());
}

#[test]
fn failed_check_exits_5_and_still_reports() {
    // Case II's mean-system residual is above 1e-3 on this coarse grid.
    let tmp = tempfile::tempdir().unwrap();
    let args = ["verify", "--preset", "case2", "--dt", "5e-3", "--paths", "200", "--epsilons", "0.2,0.1,0.05"];
    let o = stackleq(&args, tmp.path());
    assert_eq!(code(&o), 5);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean_system_oracle   FAIL"));
}
