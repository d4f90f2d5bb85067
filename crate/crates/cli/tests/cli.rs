use std::path::Path;
use std::process::Command;

fn xil() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xil"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_manifest(dir: &Path, probe: usize) -> std::path::PathBuf {
    let p = dir.join("toy.json");
    let m = serde_json::json!({
        "name": "toy-ce",
        "dataset": {"preset": "toy"},
        "strategy": {"kind": "ce", "variant": "randomize", "count": 2},
        "seeds": [0, 1],
        "probe": probe,
    });
    std::fs::write(&p, m.to_string()).unwrap();
    p
}

#[test]
fn run_is_deterministic_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), 30);
    for out in ["a", "b"] {
        let st = xil()
            .args(["run", m.to_str().unwrap(), "--threads", "2", "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(st.success());
    }
    let a = std::fs::read_to_string(dir.path().join("a/summary.json")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b/summary.json")).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 2);
    assert_eq!(summary["strategy"], "ce-c2");
    for f in ["accuracy.md", "accuracy.svg", "seed-0/metrics.csv", "seed-0/clusters.json", "seed-0/tsne.svg", "seed-1/heatmaps/probe.csv"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }

    let out = xil().arg("replay").arg(dir.path().join("a/seed-1")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("reproduces"));

    let sp = dir.path().join("sp");
    let out = xil()
        .arg("spray")
        .arg(dir.path().join("a/seed-0/heatmaps"))
        .arg("--out")
        .arg(&sp)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sp.join("clusters.json")).unwrap()).unwrap();
    assert_eq!(report["labels"].as_array().unwrap().len(), 30);
}

#[test]
fn tampered_metrics_fail_replay() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), 30);
    assert!(xil().args(["run", m.to_str().unwrap(), "--seed", "0", "--out"]).arg(dir.path().join("o")).status().unwrap().success());
    let csv = dir.path().join("o/seed-0/metrics.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    std::fs::write(&csv, text.replacen('0', "1", 1)).unwrap();
    let st = xil().arg("replay").arg(dir.path().join("o/seed-0")).status().unwrap();
    assert_eq!(st.code(), Some(1));
}

#[test]
fn failing_seeds_set_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    // three probe heatmaps are too few to cluster
    let m = write_manifest(dir.path(), 3);
    let out = xil().args(["run", m.to_str().unwrap(), "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed seeds: 0, 1"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failed"].as_array().unwrap().len(), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"name\": 1}").unwrap();
    assert_eq!(xil().args(["run", bad.to_str().unwrap()]).status().unwrap().code(), Some(2));
}
