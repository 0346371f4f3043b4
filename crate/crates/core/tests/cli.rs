use std::fs;
use std::process::Command;

fn uq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uq"))
}

const SMALL: &str = r#"{"experiment": "coverage", "model": "trace", "construction": "u-statistic",
    "m1": 8, "m2": 8, "n": 60, "noise": {"kind": "uniform", "sigma": 0.3, "U": 1.0}, "reps": 6, "seed": 5}"#;

#[test]
fn version_prints_package_version() {
    let out = uq().arg("version").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn run_writes_records_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, SMALL).unwrap();
    let out_dir = dir.path().join("out");
    let status = uq()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--reps", "4", "--threads", "2", "--out"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let records = fs::read_to_string(out_dir.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 4);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["failures"], 0);
}

#[test]
fn bad_configs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown_field.json", SMALL.replace("\"seed\"", "\"sed\"")),
        (
            "bad_alpha.json",
            SMALL.replace("\"reps\"", "\"alpha\": 1.5, \"reps\""),
        ),
        ("not_json.json", "{".to_string()),
    ];
    for (name, text) in cases {
        let path = dir.path().join(name);
        fs::write(&path, text).unwrap();
        for sub in ["validate", "run"] {
            let out = uq()
                .args([sub, "--config"])
                .arg(&path)
                .current_dir(dir.path())
                .output()
                .unwrap();
            assert_eq!(
                out.status.code(),
                Some(2),
                "{sub} {name}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
    }
    let missing = uq()
        .args(["validate", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let out = uq()
            .args(["validate", "--config"])
            .arg(&path)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}: {}",
            path.display(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
