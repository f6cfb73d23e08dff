use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_degen-lio")).args(args).output().expect("spawn degen-lio")
}

fn simulate(out: &Path, seed: &str) -> Output {
    bin(&[
        "simulate", "--scenario", "room", "--seed", seed, "--out", out.to_str().unwrap(),
        "--set", "duration=3", "--set", "rays_per_scan=400",
    ])
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(simulate(&a, "7").status.success());
    assert!(simulate(&b, "7").status.success());
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert!(fa.iter().any(|(n, _)| n == "gt.tum"));
    assert_eq!(fa, fb);
}

#[test]
fn unknown_scenario_prints_usage_and_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["simulate", "--scenario", "bogus", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus"), "{err}");
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn ape_of_ground_truth_is_zero_even_after_rigid_transform() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(simulate(&data, "1").status.success());
    let gt = data.join("gt.tum");
    let out = bin(&["ape", "--gt", gt.to_str().unwrap(), gt.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.0000");

    // Rotate 90 degrees about z and translate; quaternion (x y z w) composes with qz = (0 0 s c).
    let (s, c) = (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2);
    let moved: String = fs::read_to_string(&gt)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|x| x.parse().unwrap()).collect();
            let (px, py, pz) = (c * v[1] - s * v[2] + 3.0, s * v[1] + c * v[2] - 2.0, v[3] + 0.5);
            let (qx, qy, qz, qw) = (v[4], v[5], v[6], v[7]);
            let (rx, ry, rz, rw) = (c * qx - s * qy, c * qy + s * qx, c * qz + s * qw, c * qw - s * qz);
            format!("{:.9} {px:.12} {py:.12} {pz:.12} {rx:.12} {ry:.12} {rz:.12} {rw:.12}\n", v[0])
        })
        .collect();
    let est = tmp.path().join("moved.tum");
    fs::write(&est, moved).unwrap();
    let out = bin(&["ape", "--gt", gt.to_str().unwrap(), est.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.0000");
}

#[test]
fn run_writes_outputs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(simulate(&data, "2").status.success());
    let gt = data.join("gt.tum");
    let mut estimates = Vec::new();
    for name in ["r1", "r2"] {
        let out_dir = tmp.path().join(name);
        fs::create_dir_all(&out_dir).unwrap();
        let out = bin(&[
            "run", "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
            "--gt", gt.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("APE"));
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
        assert!(report.is_object());
        estimates.push(fs::read_to_string(out_dir.join("est.tum")).unwrap());
    }
    assert!(!estimates[0].is_empty());
    assert_eq!(estimates[0], estimates[1]);

    let est = tmp.path().join("r1").join("est.tum");
    let out = bin(&["ape", "--gt", gt.to_str().unwrap(), est.to_str().unwrap()]);
    let rmse: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(rmse.is_finite() && rmse < 1.0, "{rmse}");
}

#[test]
fn run_accepts_ablation_overrides_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(simulate(&data, "3").status.success());
    let d = data.to_str().unwrap();
    let out = bin(&["run", "--data", d, "--set", "window=off", "--set", "dade=off"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("est.tum").exists());

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "window = on\nturbo = 3\n").unwrap();
    let out = bin(&["run", "--data", d, "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("turbo"));
}
