use std::fs;
use std::process::Command;

const SMALL: [&str; 9] = [
    "batch=4",
    "units=64",
    "epsilon=10",
    "clip_bound=10",
    "height=8",
    "width=8",
    "bias_inputs=10",
    "w0=5e-4",
    "calibration_samples=128",
];

fn cli(args: &[&str], extra: &[&str]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ldp-recon"));
    cmd.args(args);
    for s in SMALL.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn attack_writes_images_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cli(&["attack", "--seed", "3", "--out", out], &["rounds=50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["quality.csv", "manifest.txt", "timings.txt", "ground_truth_0.ppm", "masked_3.ppm"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(dir.path().join("quality.csv")).unwrap();
    assert!(csv.starts_with("sample,true_unit,recovered_unit"));
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 3"));
    assert!(!manifest.contains("seconds"));
}

#[test]
fn attack_is_reproducible_from_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = cli(&["attack", "--seed", "5", "--out", d.path().to_str().unwrap()], &["rounds=20"]);
        assert!(o.status.success());
    }
    for f in ["quality.csv", "manifest.txt", "final_0.ppm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "# small run\nbatch = 2\nunits = 64\nepsilon = 10\nclip_bound = 10\n").unwrap();
    let out = dir.path().join("out");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ldp-recon"));
    cmd.args(["attack", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    for s in ["height=8", "width=8", "bias_inputs=10", "w0=5e-4", "rounds=10", "calibration_samples=64", "batch=3"] {
        cmd.args(["--set", s]);
    }
    let o = cmd.output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("batch = 3"));
}

#[test]
fn sweep_writes_one_row_per_seed_and_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        &["sweep", "--axis", "epsilon", "--values", "5,20", "--jobs", "2", "--out", dir.path().to_str().unwrap()],
        &["rounds=10", "sweep_seeds=2"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(1).unwrap().starts_with("epsilon,5,"));
    assert!(dir.path().join("timings.csv").exists());
}

#[test]
fn flsim_writes_accuracy_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        &["flsim", "--out", dir.path().to_str().unwrap()],
        &["fl_users=3", "fl_rounds=2", "fl_pool=8", "fl_test=16", "fl_histogram_users=2,3", "fl_histogram_rounds=1", "rounds=10"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc = fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 3);
    let hist = fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2 * 6);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cli(&["attack", "--out", out], &["no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = Command::new(env!("CARGO_BIN_EXE_ldp-recon"))
        .args(["attack", "--set", "batch=4"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = cli(&["sweep", "--axis", "colour", "--values", "1", "--out", out], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = cli(&["attack", "--out", out], &["units=2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_masks");
    let mask = format!("mask=external:{}", missing.display());
    let o = cli(&["attack", "--out", dir.path().to_str().unwrap()], &[&mask]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
