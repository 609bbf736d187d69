use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn koopstab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopstab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("KOOPSTAB_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn preset_survives_toml_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["pendulum-direct", "pendulum-indirect"] {
        let o = koopstab(&["config", "--preset", name], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let path = dir.path().join(format!("{name}.toml"));
        fs::write(&path, &o.stdout).unwrap();
        let again = koopstab(&["config", "--config", path.to_str().unwrap()], dir.path());
        assert!(again.status.success(), "{}", stderr(&again));
        assert_eq!(o.stdout, again.stdout);
    }
}

#[test]
fn unknown_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopstab(&["config", "--preset", "pendulum-direct"], dir.path());
    let text = String::from_utf8(o.stdout)
        .unwrap()
        .replace("alpha = 3.0", "alpha = 3.0\nalhpa = 3.0");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let o = koopstab(&["collect", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("alhpa"), "{e}");
    assert!(e.contains("line"), "{e}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["collect"],
        &["collect", "--preset", "nope"],
        &[
            "synth",
            "--preset",
            "pendulum-direct",
            "--route",
            "sideways",
        ],
        &["frobnicate"],
    ];
    for args in cases {
        let o = koopstab(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn invalid_multipliers_are_rejected_before_computing() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopstab(&["config", "--preset", "pendulum-direct"], dir.path());
    let text = String::from_utf8(o.stdout)
        .unwrap()
        .replace("beta = 1.5", "beta = 2.0");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let o = koopstab(&["synth", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("cert.json").exists());
}

#[test]
fn collect_then_identify_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopstab(&["collect", "--preset", "pendulum-indirect"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["dataset.json", "dataset.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1001);
    assert!(csv.starts_with("t,x1,x2,u1,xdot1,xdot2"));

    let data = dir.path().join("dataset.json");
    let o = koopstab(
        &[
            "identify",
            "--preset",
            "pendulum-indirect",
            "--data",
            data.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let model = json(&dir.path().join("model.json"));
    assert_eq!(model["N"], 4);
    assert_eq!(model["A"]["data"].as_array().unwrap().len(), 16);

    let mut tampered = json(&data);
    tampered["Z1"]["data"][0] = serde_json::json!(123.0);
    let bad = dir.path().join("tampered.json");
    fs::write(&bad, tampered.to_string()).unwrap();
    let o = koopstab(
        &[
            "identify",
            "--preset",
            "pendulum-indirect",
            "--data",
            bad.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fingerprint"));
}

#[test]
fn synthesis_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = koopstab(
            &["synth", "--preset", "pendulum-direct", "--no-verify"],
            d.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["cert.json", "synth.json", "manifest.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let cert = json(&a.path().join("cert.json"));
    assert_eq!(cert["route"], "direct");
    assert_eq!(cert["nu"], 10.0);
    assert!(cert["margin"].as_f64().unwrap() <= -1e-8);
}

#[test]
fn seed_override_changes_the_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    koopstab(&["collect", "--preset", "pendulum-direct"], a.path());
    koopstab(
        &["collect", "--preset", "pendulum-direct", "--seed", "7"],
        b.path(),
    );
    let fa = json(&a.path().join("dataset.json"))["fingerprint"].clone();
    let fb = json(&b.path().join("dataset.json"))["fingerprint"].clone();
    assert_ne!(fa, fb);
}

#[test]
fn exit_status_follows_the_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopstab(
        &["synth", "--preset", "pendulum-direct", "--no-verify"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cert = dir.path().join("cert.json");
    let vdir = dir.path().join("verify");
    let o = koopstab(
        &[
            "verify",
            "--preset",
            "pendulum-direct",
            "--cert",
            cert.to_str().unwrap(),
            "--suite",
            "petersen",
            "--suite",
            "certificate",
        ],
        &vdir,
    );
    let reports = json(&vdir.join("reports.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    let all = reports.iter().all(|r| r["pass"] == true);
    assert_eq!(
        o.status.code(),
        Some(if all { 0 } else { 3 }),
        "{}",
        stderr(&o)
    );
    assert_eq!(json(&vdir.join("manifest.json"))["pass"], all);
}

#[test]
fn infeasible_synthesis_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopstab(
        &[
            "synth",
            "--preset",
            "pendulum-direct",
            "--margin",
            "1e6",
            "--no-verify",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("cert.json").exists());
}

#[test]
fn simulate_and_plot_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    koopstab(
        &["synth", "--preset", "pendulum-direct", "--no-verify"],
        dir.path(),
    );
    let cert = dir.path().join("cert.json");
    let cert = cert.to_str().unwrap();
    let o = koopstab(
        &[
            "simulate",
            "--preset",
            "pendulum-direct",
            "--cert",
            cert,
            "--x0",
            "0.1,-0.1",
            "--t-end",
            "1",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = fs::read_to_string(dir.path().join("traj_000.csv")).unwrap();
    assert!(traj.starts_with("t,x1,x2,u1"));
    assert_eq!(traj.lines().count(), 102);

    let o = koopstab(
        &[
            "plot",
            "--preset",
            "pendulum-direct",
            "--cert",
            cert,
            "--t-end",
            "2",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("phase.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("r=\"4\"").count(), 8);
}

#[test]
fn certificate_for_another_dictionary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    koopstab(
        &["synth", "--preset", "pendulum-direct", "--no-verify"],
        dir.path(),
    );
    let o = koopstab(&["config", "--preset", "pendulum-direct"], dir.path());
    let text = String::from_utf8(o.stdout).unwrap().replace(
        "[dictionary]\nname = \"pendulum\"",
        "[dictionary]\nname = \"identity\"\nn = 2",
    );
    let path = dir.path().join("ident.toml");
    fs::write(&path, text).unwrap();
    let cert = dir.path().join("cert.json");
    let o = koopstab(
        &[
            "simulate",
            "--config",
            path.to_str().unwrap(),
            "--cert",
            cert.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
