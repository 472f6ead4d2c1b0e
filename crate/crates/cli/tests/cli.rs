use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pdrecon"));
    c.env("RUST_LOG", "warn");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report/summary.json")).unwrap()).unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn read_column(path: &Path, column: usize) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(column).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn flat_identity_runs_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["full", path(&config("flat_identity.cfg")), "-o", path(tmp.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(tmp.path());
    assert_eq!(s["status"], "ok");
    let errors = &s["errors"];
    // det A propagates from the anchor exactly; the shape carries the P1
    // error of the quadratic potential
    assert!(errors["s"]["relative_l2"].as_f64().unwrap() < 1e-10, "{errors}");
    assert!(
        errors["gamma_frobenius"]["relative_l2"].as_f64().unwrap() < 1e-2,
        "{errors}"
    );
    for f in ["atilde", "theta", "s", "gamma", "xi", "zeta", "error"] {
        assert!(tmp.path().join(format!("recon/{f}.csv")).exists(), "{f}");
    }
    assert!(tmp.path().join("report/timings.json").exists());
}

#[test]
fn catenoid_run_reports_errors_and_identities() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["full", path(&config("catenoid_paper.cfg")), "-o", path(tmp.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(tmp.path());
    assert_eq!(s["status"], "ok");
    assert!(s["conditions"]["c0"].as_f64().unwrap() > 0.0);
    assert!(s["data_identities"]["transfer_orthonormality"].as_f64().unwrap() < 1e-8);
    for k in ["xi", "zeta", "s"] {
        let e = s["errors"][k]["relative_l2"].as_f64().unwrap();
        assert!(e > 0.0 && e < 0.2, "{k}: {e}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["mesh"]["n_radial"], 40);
    assert_eq!(manifest["config"]["metric"]["kind"], "catenoid");
    let dataset: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("dataset/manifest.json")).unwrap()).unwrap();
    assert_eq!(dataset["noise"], Value::Null);
    assert_eq!(dataset["bcs"][3]["c11"], 0.2);
}

#[test]
fn duplicate_pairs_exit_with_condition_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["full", path(&config("duplicate_pairs.cfg")), "-o", path(tmp.path())]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("condition 2"));
    let s = summary(tmp.path());
    assert_eq!(s["status"], "condition_failure");
    assert_eq!(s["conditions"]["condition_two"], false);
    let failing = fs::read_to_string(tmp.path().join("report/failing_nodes.csv")).unwrap();
    assert!(failing.starts_with("node_id,condition\n"));
    assert!(failing.lines().skip(1).all(|l| l.ends_with(",2")));
    assert!(failing.lines().count() > 1);
    assert!(!tmp.path().join("recon").exists());
}

#[test]
fn reference_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("catenoid_paper.cfg");
    let args = ["--reference", "full", path(&cfg), "-o", path(tmp.path())];
    assert_eq!(code(&run(&args)), 0);
    let first = snapshot(tmp.path());
    assert!(!first.contains_key(Path::new("report/timings.json")));
    assert_eq!(code(&run(&args)), 0);
    let second = snapshot(tmp.path());
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(second[k] == *v, "{} differs", k.display());
    }
}

#[test]
fn reconstruct_from_export_matches_full() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("catenoid_paper.cfg");
    let (full, fwd, rec) = (tmp.path().join("full"), tmp.path().join("fwd"), tmp.path().join("rec"));
    assert_eq!(code(&run(&["--reference", "full", path(&cfg), "-o", path(&full)])), 0);
    assert_eq!(code(&run(&["--reference", "forward", path(&cfg), "-o", path(&fwd)])), 0);
    assert!(!fwd.join("recon").exists());
    assert_eq!(summary(&fwd)["status"], "ok");
    let out = run(&[
        "--reference",
        "reconstruct",
        path(&cfg),
        "--input",
        path(&fwd),
        "-o",
        path(&rec),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for col in 1..=3 {
        let a = read_column(&full.join("recon/gamma.csv"), col);
        let b = read_column(&rec.join("recon/gamma.csv"), col);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
    let (a, b) = (summary(&rec), summary(&full));
    for k in ["xi", "zeta", "s"] {
        let (x, y) = (
            a["errors"][k]["relative_l2"].as_f64().unwrap(),
            b["errors"][k]["relative_l2"].as_f64().unwrap(),
        );
        assert!((x - y).abs() <= 1e-10 * y, "{k}: {x} vs {y}");
    }
}

#[test]
fn evaluate_compares_exports() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&run(&[
            "full",
            path(&config("flat_identity.cfg")),
            "-o",
            path(tmp.path())
        ])),
        0
    );
    let mesh = tmp.path().join("mesh");
    let out = run(&[
        "evaluate",
        "--mesh",
        path(&mesh),
        path(&tmp.path().join("phantom")),
        path(&tmp.path().join("recon")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["zeta"], summary(tmp.path())["errors"]["zeta"]);
    let same = run(&[
        "evaluate",
        "--mesh",
        path(&mesh),
        path(&tmp.path().join("recon/gamma.csv")),
        path(&tmp.path().join("recon")),
    ]);
    let report: Value = serde_json::from_slice(&same.stdout).unwrap();
    assert!(report["gamma_frobenius"]["relative_l2"].as_f64().unwrap() < 1e-14);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["full", path(&tmp.path().join("missing.cfg"))])), 2);
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "schema_version = 1\n[mesh]\nkind = \"annulus\"\nr_inner = 3.0\n").unwrap();
    assert_eq!(code(&run(&["full", path(&bad), "-o", path(tmp.path())])), 2);
    fs::write(&bad, "schema_version = \n").unwrap();
    assert_eq!(code(&run(&["full", path(&bad)])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let out = run(&["evaluate", "--mesh", path(&tmp.path().join("nowhere")), "a", "b"]);
    assert_eq!(code(&out), 1);
    // reconstruct without an exported dataset
    let cfg = config("flat_identity.cfg");
    let out = run(&["reconstruct", path(&cfg), "-o", path(&tmp.path().join("empty"))]);
    assert_eq!(code(&out), 1);
}
