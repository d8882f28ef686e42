use std::path::Path;
use std::process::Command;

use gimbalcal::io;
use gimbalcal::simulator::{default_truth_model, PointSource, SimulationConfig, TrackingScenario};

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn gimbalcal(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_gimbalcal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = gimbalcal(dir, args);
    assert_eq!(o.code, 0, "{args:?}\n{}\n{}", o.stdout, o.stderr);
    o.stdout
}

fn write_config<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> String {
    std::fs::write(dir.join(name), io::to_toml(value).unwrap()).unwrap();
    name.to_string()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn study_pipeline_produces_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--seed", "3", "--out", "study/calibration"]);
    ok(d, &["simulate", "--preset", "validation", "--seed", "3", "--out", "study/validation"]);
    let summary = ok(d, &["calibrate", "study/calibration/dataset.json"]);
    assert!(summary.contains("81 images"), "{summary}");
    ok(d, &["validate", "study/validation/dataset.json", "--result", "study/calibration/result.json"]);
    ok(d, &["report", "study"]);

    let t1 = read(d, "study/table1.csv");
    let t2 = read(d, "study/table2.csv");
    let t3 = read(d, "study/table3.csv");
    assert!(t1.starts_with("dataset,n_images,mean_reproj_px,std_reproj_px\n"));
    assert!(t2.starts_with("joint,mean_err_rad,std_err_rad\n"));
    assert!(t3.starts_with("param_class,mean_err,std_err,unit\n"));
    assert_eq!(t1.lines().count(), 3);
    for line in t1.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1], "81");
        let mean: f64 = fields[2].parse().unwrap();
        assert!((0.30..=0.48).contains(&mean), "{line}");
    }
    assert!(t2.contains("calibration_joint_1_gauge_aligned"));
    assert!(read(d, "study/summary.txt").contains("Kinematic parameter error"));
    assert!(read(d, "study/calibration/result_stats.csv").starts_with("set,n_points"));

    let before: Vec<String> = io::TABLE_FILES.iter().map(|f| read(d, &format!("study/{f}"))).collect();
    ok(d, &["report", "study"]);
    let after: Vec<String> = io::TABLE_FILES.iter().map(|f| read(d, &format!("study/{f}"))).collect();
    assert_eq!(before, after);
}

#[test]
fn serial_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for run in ["a", "b"] {
        ok(d, &["--serial", "simulate", "--seed", "11", "--out", run]);
        ok(d, &["--serial", "calibrate", &format!("{run}/dataset.json")]);
    }
    for f in ["dataset.json", "truth.json", "init.json", "result.json", "result_stats.csv"] {
        assert_eq!(read(d, &format!("a/{f}")), read(d, &format!("b/{f}")), "{f}");
    }
    ok(d, &["simulate", "--seed", "11", "--out", "c"]);
    assert_eq!(read(d, "a/dataset.json"), read(d, "c/dataset.json"));
}

#[test]
fn single_configuration_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut c = SimulationConfig::calibration_default(1);
    for r in &mut c.joint_grid {
        r.count = 1;
    }
    let cfg = write_config(d, "one.toml", &c);
    let out = ok(d, &["simulate", "--config", &cfg, "--out", "one"]);
    assert!(out.contains("wrote 1 sets"), "{out}");
    assert_eq!(io::load_dataset(&d.join("one/dataset.json")).unwrap().sets.len(), 1);
}

#[test]
fn malformed_config_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let good = io::to_toml(&SimulationConfig::calibration_default(1)).unwrap();
    let line = good.lines().position(|l| l.starts_with("pixel_noise_sigma")).unwrap();
    let bad: Vec<&str> = good
        .lines()
        .enumerate()
        .map(|(i, l)| if i == line { "pixel_noise_sigma = \"loud\"" } else { l })
        .collect();
    std::fs::write(d.join("bad.toml"), bad.join("\n")).unwrap();
    let o = gimbalcal(d, &["simulate", "--config", "bad.toml"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains(&format!("line {}", line + 1)), "{}", o.stderr);

    std::fs::write(d.join("run.toml"), "[calibration]\nmin_sets = 5\ncolour = 1\n").unwrap();
    ok(d, &["simulate", "--out", "s"]);
    let o = gimbalcal(d, &["calibrate", "s/dataset.json", "--config", "run.toml"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("colour"), "{}", o.stderr);
}

#[test]
fn input_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--out", "s"]);
    let o = gimbalcal(d, &["calibrate", "s/dataset.json", "--mode", "encoders"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("encoders"), "{}", o.stderr);

    let o = gimbalcal(d, &["validate", "s/dataset.json", "--result", "missing.json"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("missing.json"));
    let o = gimbalcal(d, &["track", "nope.json", "--result", "missing.json"]);
    assert_eq!(o.code, 1);

    std::fs::create_dir_all(d.join("partial/calibration")).unwrap();
    std::fs::copy(d.join("s/truth.json"), d.join("partial/calibration/truth.json")).unwrap();
    let o = gimbalcal(d, &["report", "partial"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("calibration/result.json") && o.stderr.contains("validation/truth.json"), "{}", o.stderr);
}

#[test]
fn encoders_mode_runs_when_angles_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut c = SimulationConfig::calibration_default(5);
    c.encoder_angles = true;
    let cfg = write_config(d, "enc.toml", &c);
    ok(d, &["simulate", "--config", &cfg, "--out", "enc"]);
    let out = ok(d, &["calibrate", "enc/dataset.json", "--mode", "encoders"]);
    assert!(out.contains("calibration: 81 images"), "{out}");
    let result = io::load_result(&d.join("enc/result.json")).unwrap();
    assert_eq!(result.report.params.len(), 18);
}

#[test]
fn non_convergence_exits_3_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--out", "s"]);
    std::fs::write(d.join("short.toml"), "[calibration.solve]\nmax_iterations = 1\n").unwrap();
    let o = gimbalcal(d, &["calibrate", "s/dataset.json", "--config", "short.toml"]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    let result = io::load_result(&d.join("s/result.json")).unwrap();
    assert_eq!(result.report.iterations, 1);
}

#[test]
fn exact_data_calibrates_and_tracks_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let c = SimulationConfig {
        point_source: PointSource::GroundTruth,
        ..SimulationConfig::calibration_default(2).noiseless()
    };
    let cfg = write_config(d, "exact.toml", &c);
    ok(d, &["simulate", "--config", &cfg, "--out", "exact"]);
    let out = ok(d, &["calibrate", "exact/dataset.json", "--init", "exact/truth.json"]);
    assert!(out.contains("mean reprojection error 0.000000 px"), "{out}");

    let mut s = TrackingScenario::default_with_model(default_truth_model(), 4);
    s.pixel_noise_sigma = 0.0;
    s.frames = 40;
    let cfg = write_config(d, "track.toml", &s);
    ok(d, &["simulate", "--preset", "tracking", "--config", &cfg, "--out", "seq"]);
    let out = ok(d, &["track", "seq/sequence.json", "--result", "exact/result.json"]);
    assert!(out.contains("tracked 40 frames (0 failed)"), "{out}");
    let rmse = read(d, "seq/track_rmse.csv");
    for line in rmse.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v < 1e-6, "{line}");
    }
    let track = read(d, "seq/track.csv");
    assert!(track.starts_with("timestamp,rx,ry,rz,tx,ty,tz,beta_1,beta_2,status\n"));
    assert_eq!(track.lines().count(), 41);
}
