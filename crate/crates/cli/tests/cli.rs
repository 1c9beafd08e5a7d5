use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn quadscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadscan")).args(args).output().expect("run quadscan")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_passes() {
    let o = quadscan(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all suites passed"));
}

#[test]
fn injected_fault_fails_the_quadtree_suite() {
    let o = quadscan(&["selftest", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    let failing = out.lines().find(|l| l.starts_with("failing suites:")).expect("summary line");
    assert_eq!(failing, "failing suites: quadtree_scan");
}

#[test]
fn perm_dump_is_json() {
    let o = quadscan(&["perm", "--height", "4", "--width", "4", "--kind", "coarse", "--dump"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let fwd: Vec<usize> = serde_json::from_value(v["forward"].clone()).unwrap();
    assert_eq!(fwd, [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
    let inv: Vec<usize> = serde_json::from_value(v["inverse"].clone()).unwrap();
    assert!((0..16).all(|i| inv[fwd[i]] == i));

    let o = quadscan(&["perm", "--height", "8", "--width", "8", "--kind", "fine", "--dump"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let fwd: Vec<usize> = serde_json::from_value(v["forward"].clone()).unwrap();
    assert_eq!(fwd[..4], [0, 1, 8, 9]);
    assert_eq!(fwd.len(), 64);
}

#[test]
fn perm_rejects_indivisible_grids() {
    let o = quadscan(&["perm", "--height", "6", "--width", "8", "--kind", "fine"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flops_json_for_lite() {
    let o = quadscan(&["flops", "--variant", "lite", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["input"], 224);
    let params = v["complexity"]["params"].as_f64().unwrap();
    assert!((params / 5.47e6 - 1.0).abs() < 0.2);
    assert_eq!(v["complexity"]["flops"].as_u64().unwrap(), 2 * v["complexity"]["macs"].as_u64().unwrap());
}

#[test]
fn bench_scan_small_lengths() {
    let o = quadscan(&["bench", "scan", "--lengths", "32,64", "--reps", "3", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["outputs_match_oracle"], true);
    assert_eq!(quadscan(&["bench", "scan", "--lengths", "64,32"]).status.code(), Some(2));
}

fn write_pgm(path: &Path, side: usize) {
    let mut bytes = format!("P5\n# test card\n{side} {side}\n255\n").into_bytes();
    bytes.extend((0..side * side).map(|i| ((i * 7) % 256) as u8));
    fs::write(path, bytes).unwrap();
}

#[test]
fn train_then_export_partition() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"steps": 4, "batch_size": 4, "train_size": 16, "eval_size": 8, "eval_every": 2}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = quadscan(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["losses"].as_array().unwrap().len(), 4);
    assert_eq!(report["config"]["seed"], 3);

    let image = dir.path().join("img.pgm");
    write_pgm(&image, 32);
    let out = dir.path().join("maps");
    let args = |o: &Path| {
        quadscan(&[
            "export-partition",
            "--checkpoint",
            run.join("checkpoint.qten").to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            o.to_str().unwrap(),
        ])
    };
    let o = args(&out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records: serde_json::Value = serde_json::from_slice(&fs::read(out.join("partition.json")).unwrap()).unwrap();
    let records = records.as_array().unwrap();
    assert_eq!(records.len(), 2);
    for r in records {
        let file = out.join(r["score_map_file"].as_str().unwrap());
        let pgm = fs::read(file).unwrap();
        assert!(pgm.starts_with(b"P5"));
    }
    let again = dir.path().join("maps2");
    assert!(args(&again).status.success());
    assert_eq!(fs::read(out.join("partition.json")).unwrap(), fs::read(again.join("partition.json")).unwrap());
}

#[test]
fn unknown_config_keys_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"stepz": 4}"#).unwrap();
    let o = quadscan(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("img.pgm");
    write_pgm(&image, 32);
    let o = quadscan(&[
        "export-partition",
        "--checkpoint",
        dir.path().join("nope.qten").to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
