use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn wskf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wskf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wskf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small corridor dataset: 30 frames plus a stationary tail.
fn corridor(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec![
        "synth",
        "--scene",
        "corridor",
        "--frames",
        "30",
        "--points-per-frame",
        "4000",
        "--seed",
        "5",
        "--out",
        p(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_byte_identical_for_a_fixed_seed() {
    let tmp = TempDir::new().unwrap();
    for name in ["a", "b"] {
        ok(&[
            "synth", "--frames", "12", "--points-per-frame", "2000", "--seed", "11", "--two-session", "--nodes", "30",
            "--out", p(&tmp.path().join(name)),
        ]);
    }
    let a = read_tree(&tmp.path().join("a"));
    let b = read_tree(&tmp.path().join("b"));
    assert!(a.len() > 12);
    assert_eq!(a, b);
}

#[test]
fn keyframes_writes_one_row_per_frame() {
    let tmp = TempDir::new().unwrap();
    let data = corridor(tmp.path(), &[]);
    let out = tmp.path().join("kf");
    ok(&[
        "keyframes", "--clouds", p(&data.join("clouds")), "--trajectory", p(&data.join("trajectory.tum")),
        "--out", p(&out),
    ]);
    let rows = csv_rows(&out.join("decisions.csv"));
    assert_eq!(rows.len(), 30);
    assert_eq!(
        fs::read_to_string(out.join("decisions.csv")).unwrap().lines().next().unwrap(),
        "frame,timestamp,dw,keyframe,affected,new,skipped,ms"
    );
    assert_eq!(rows[0][2], "inf");
    assert_eq!(rows[0][3], "1");
    let listed = fs::read_to_string(out.join("keyframes.txt")).unwrap().lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(listed, rows.iter().filter(|r| r[3] == "1").count());
    assert_eq!(csv_rows(&out.join("scores.csv")).len(), 30);
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("voxel_size = 4"));
}

#[test]
fn threshold_extremes() {
    let tmp = TempDir::new().unwrap();
    let data = corridor(tmp.path(), &[]);
    let run = |tau: &str, name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "keyframes", "--clouds", p(&data.join("clouds")), "--trajectory", p(&data.join("trajectory.tum")),
            "--tau", tau, "--out", p(&out),
        ]);
        csv_rows(&out.join("decisions.csv"))
    };
    let high = run("1e9", "high");
    assert_eq!(high.iter().filter(|r| r[3] == "1").count(), 1);

    let zero = run("0", "zero");
    for row in &zero[1..] {
        let dw: f64 = row[2].parse().unwrap();
        if dw.is_finite() {
            assert!(dw > 0.0);
            assert_eq!(row[3], "1", "scored frame {} not a keyframe at tau 0", row[0]);
        }
    }
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let data = corridor(tmp.path(), &[]);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "tau = 1e9\nradius = 60\n").unwrap();
    let out = tmp.path().join("kf");
    ok(&[
        "keyframes", "--clouds", p(&data.join("clouds")), "--trajectory", p(&data.join("trajectory.tum")),
        "--config", p(&cfg), "--tau", "0.5", "--out", p(&out),
    ]);
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("tau = 0.5"));
    assert!(echo.contains("radius = 60"));
    assert!(echo.contains("min_points = 5"));
}

#[test]
fn calibrate_suggests_threshold_above_stationary_floor() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("still");
    ok(&[
        "synth", "--frames", "1", "--stationary", "20", "--points-per-frame", "4000", "--seed", "2", "--out",
        p(&data),
    ]);
    let mut reports = Vec::new();
    for name in ["c1", "c2"] {
        let out = tmp.path().join(name);
        ok(&[
            "calibrate", "--clouds", p(&data.join("clouds")), "--trajectory", p(&data.join("trajectory.tum")),
            "--out", p(&out),
        ]);
        reports.push(fs::read_to_string(out.join("calibration.txt")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let value = |key: &str| -> f64 {
        reports[0]
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(value("min") > 0.0);
    assert!(value("suggested_tau") > value("min"));
    assert_eq!(value("scored"), 20.0);
}

#[test]
fn calibrate_rejects_single_frame() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("one");
    ok(&["synth", "--frames", "1", "--points-per-frame", "1000", "--out", p(&data)]);
    let out = wskf(&[
        "calibrate", "--clouds", p(&data.join("clouds")), "--trajectory", p(&data.join("trajectory.tum")),
        "--out", p(&tmp.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient frames"));
}

fn two_session(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("ts");
    let mut args = vec![
        "synth", "--frames", "1", "--points-per-frame", "100", "--two-session", "--nodes", "60", "--loops", "6",
        "--seed", "8", "--out", p(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("merge")
}

fn summary_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
        .parse()
        .unwrap()
}

fn merge_args<'a>(m: &'a Path, out: &'a Path) -> Vec<String> {
    vec![
        "merge".into(),
        "--graph1".into(),
        p(&m.join("session1.g2o")).into(),
        "--trajectory2".into(),
        p(&m.join("session2.tum")).into(),
        "--odometry2".into(),
        p(&m.join("odometry2.g2o")).into(),
        "--t-init".into(),
        p(&m.join("t_init.txt")).into(),
        "--truth2".into(),
        p(&m.join("session2_truth.tum")).into(),
        "--out".into(),
        p(out).into(),
    ]
}

#[test]
fn merge_exact_measurements_reach_zero_cost() {
    let tmp = TempDir::new().unwrap();
    let m = two_session(tmp.path(), &["--odo-sigma-trans", "0", "--odo-sigma-rot-deg", "0"]);
    let out = tmp.path().join("merged");
    let mut args = merge_args(&m, &out);
    args.extend(["--loops".into(), p(&m.join("loops.g2o")).into()]);
    let stdout = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(summary_value(&stdout, "final_cost") < 1e-10, "{stdout}");
    assert!(summary_value(&stdout, "ate_after") < 1e-6);
    for name in ["merged.g2o", "session2.tum", "report.csv", "summary.txt", "config.txt"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn merge_with_identity_init_on_aligned_input_stays_put() {
    let tmp = TempDir::new().unwrap();
    let m = two_session(tmp.path(), &[]);
    let out = tmp.path().join("merged");
    // session 2 already expressed in the session-1 world
    let mut args = merge_args(&m, &out);
    args[4] = p(&m.join("session2_truth.tum")).into();
    args.drain(5..9);
    args.extend(["--loops".into(), p(&m.join("loops.g2o")).into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let input = fs::read_to_string(m.join("session2_truth.tum")).unwrap();
    let output = fs::read_to_string(out.join("session2.tum")).unwrap();
    let rows = |t: &str| -> Vec<Vec<f64>> {
        t.lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let (a, b) = (rows(&input), rows(&output));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        let d = ((x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2) + (x[3] - y[3]).powi(2)).sqrt();
        assert!(d < 0.05, "moved {d}");
    }
}

#[test]
fn merge_missing_loop_file_warns_and_optimizes() {
    let tmp = TempDir::new().unwrap();
    let m = two_session(tmp.path(), &[]);
    let out = tmp.path().join("merged");
    let mut args = merge_args(&m, &out);
    args.extend(["--loops".into(), p(&tmp.path().join("absent.g2o")).into()]);
    let res = wskf(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("warning"));
    assert!(out.join("session2.tum").is_file());
}

#[test]
fn merge_disconnected_session_is_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let m = two_session(tmp.path(), &[]);
    let empty = tmp.path().join("none.g2o");
    fs::write(&empty, "# no edges\n").unwrap();
    let out = tmp.path().join("merged");
    let mut args = merge_args(&m, &out);
    args[6] = p(&empty).into();
    args.extend(["--loops".into(), p(&m.join("loops.g2o")).into()]);
    let res = wskf(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("gauge"));
}

#[test]
fn bench_orders_strategies() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bench");
    let stdout = ok(&["bench", "--frames", "4", "--grid", "12", "12", "8", "--out", p(&out)]);
    assert!(stdout.contains("batch_slower_than_incremental = true"), "{stdout}");
    assert!(summary_value(&stdout, "literal_max_cov_divergence") > 0.0);
    assert_eq!(summary_value(&stdout, "points_per_frame"), 50_000.0);
    assert_eq!(csv_rows(&out.join("bench_frames.csv")).len(), 4);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(wskf(&["keyframes", "--clouds", "x"]).status.code(), Some(1));
    assert_eq!(wskf(&["bench", "--estimator", "median"]).status.code(), Some(1));
    assert_eq!(wskf(&["nonsense"]).status.code(), Some(1));
    assert_eq!(wskf(&["--help"]).status.code(), Some(0));
    let tmp = TempDir::new().unwrap();
    let res = wskf(&[
        "keyframes", "--clouds", p(&tmp.path().join("missing")), "--trajectory", "t.tum", "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(1));
}
