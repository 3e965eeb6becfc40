//! End-to-end runs of the binary: exit codes, stdout/stderr separation,
//! and determinism of non-timing output.

use std::path::PathBuf;
use std::process::{Command, Output};

fn testdata(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/testdata").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_packedadt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_packedadt"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn schema_check_ok_and_invalid() {
    let out = run(&["schema", "check", testdata("tree.adt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");

    let dir = std::env::temp_dir().join("packedadt-cli-badschema");
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.adt");
    std::fs::write(&bad, "data Bad = K Bad Int\n").unwrap();
    let out = run(&["schema", "check", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("field order"));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = run(&["schema", "check", "--frobnicate", "x.adt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn socal_check_rejections_exit_2() {
    let out = run(&["socal", "check", testdata("double_write.socal").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("WriteToWrittenLocation"));

    let out = run(&["socal", "check", testdata("bad_after.socal").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UnwrittenDependency"));
}

#[test]
fn socal_run_buildtree_prints_sum() {
    let out = run(&["socal", "run", testdata("buildtree.socal").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "4");
}

#[test]
fn socal_check_trace_is_json_lines() {
    let out = run(&["socal", "check", "--trace", testdata("buildtree.socal").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut rules = Vec::new();
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("each trace line is JSON");
        for key in ["rule", "e", "A", "N", "c_delta"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        rules.push(v["rule"].as_str().unwrap().to_string());
    }
    assert!(rules.iter().any(|r| r == "T-LetLoc-IntroLocVec"));
    assert!(rules.iter().any(|r| r == "T-DataConstructor-FullyFactored"));
}

#[test]
fn socal_fuzz_small_run() {
    let out = run(&["socal", "fuzz", "--seed", "3", "--count", "25"]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let v: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(v["passed"], 25);

    let out = run(&["socal", "fuzz", "--count", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pack_unpack_roundtrip_both_layouts() {
    let dir = std::env::temp_dir().join("packedadt-cli-pack");
    std::fs::create_dir_all(&dir).unwrap();
    let input = dir.join("value.json");
    let json = r#"{"ctor":"Node","args":[{"ctor":"Leaf","args":[5]},{"ctor":"Node","args":[{"ctor":"Leaf","args":[6]},{"ctor":"Leaf","args":[7]}]}]}"#;
    std::fs::write(&input, json).unwrap();
    for layout in ["flat", "factored"] {
        let fadt = dir.join(format!("value-{layout}.fadt"));
        let out = run(&[
            "pack",
            "--schema",
            testdata("tree.adt").to_str().unwrap(),
            "--type",
            "Tree",
            "--layout",
            layout,
            "--input",
            input.to_str().unwrap(),
            "--out",
            fadt.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{out:?}");
        let out = run(&["unpack", "--schema", testdata("tree.adt").to_str().unwrap(), fadt.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{out:?}");
        let got: serde_json::Value =
            serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
        let want: serde_json::Value = serde_json::from_str(json).unwrap();
        assert_eq!(got, want, "layout {layout}");
    }
}

#[test]
fn pack_respects_first_chunk_env() {
    let dir = std::env::temp_dir().join("packedadt-cli-chunk");
    std::fs::create_dir_all(&dir).unwrap();
    let input = dir.join("value.json");
    std::fs::write(&input, r#"{"ctor":"Leaf","args":[1]}"#).unwrap();
    let fadt = dir.join("value.fadt");
    let out = run_env(
        &[
            "pack",
            "--schema",
            testdata("tree.adt").to_str().unwrap(),
            "--type",
            "Tree",
            "--layout",
            "flat",
            "--input",
            input.to_str().unwrap(),
            "--out",
            fadt.to_str().unwrap(),
        ],
        &[("PACKEDADT_FIRST_CHUNK", "32")],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    // Below the minimum is a usage error.
    let out = run_env(
        &[
            "pack",
            "--schema",
            testdata("tree.adt").to_str().unwrap(),
            "--type",
            "Tree",
            "--layout",
            "flat",
            "--input",
            input.to_str().unwrap(),
            "--out",
            fadt.to_str().unwrap(),
        ],
        &[("PACKEDADT_FIRST_CHUNK", "8")],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unpack_rejects_corrupt_magic() {
    let dir = std::env::temp_dir().join("packedadt-cli-magic");
    std::fs::create_dir_all(&dir).unwrap();
    let input = dir.join("value.json");
    std::fs::write(&input, r#"{"ctor":"Leaf","args":[1]}"#).unwrap();
    let fadt = dir.join("value.fadt");
    let out = run(&[
        "pack",
        "--schema",
        testdata("tree.adt").to_str().unwrap(),
        "--type",
        "Tree",
        "--layout",
        "factored",
        "--input",
        input.to_str().unwrap(),
        "--out",
        fadt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let mut bytes = std::fs::read(&fadt).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&fadt, &bytes).unwrap();
    let out = run(&["unpack", "--schema", testdata("tree.adt").to_str().unwrap(), fadt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_run_csv_grid() {
    let out = run(&[
        "bench", "run", "--suite", "LinearListReduction", "--pass", "reduce", "--sizes", "500",
        "--layouts", "flat,factored", "--modes", "mutable", "--reps", "3", "--format", "csv",
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.trim().lines().collect();
    assert_eq!(lines.len(), 3, "header + 2 data rows: {stdout}");
    assert!(lines[0].starts_with("suite,pass,size,layout,mode,median_ns"));

    // Same seed, byte-identical non-timing output: compare counter columns.
    let again = run(&[
        "bench", "run", "--suite", "LinearListReduction", "--pass", "reduce", "--sizes", "500",
        "--layouts", "flat,factored", "--modes", "mutable", "--reps", "3", "--format", "csv",
    ]);
    let a = String::from_utf8_lossy(&out.stdout).to_string();
    let b = String::from_utf8_lossy(&again.stdout).to_string();
    let strip_timing = |s: &str| -> Vec<Vec<String>> {
        s.trim()
            .lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| ![5usize, 6, 7, 8].contains(i))
                    .map(|(_, c)| c.to_string())
                    .collect()
            })
            .collect()
    };
    assert_eq!(strip_timing(&a), strip_timing(&b));

    let out = run(&["bench", "run", "--suite", "Nope", "--pass", "x", "--sizes", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_json_and_csv_agree_after_normalization() {
    let args = |fmt: &str| {
        vec![
            "bench".to_string(), "run".into(), "--suite".into(), "MonoTree".into(),
            "--pass".into(), "sumTree".into(), "--sizes".into(), "127".into(),
            "--reps".into(), "3".into(), "--seed".into(), "1".into(),
            "--format".into(), fmt.into(),
        ]
    };
    let json_out = run(&args("json").iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let csv_out = run(&args("csv").iter().map(|s| s.as_str()).collect::<Vec<_>>());
    assert_eq!(json_out.status.code(), Some(0));
    assert_eq!(csv_out.status.code(), Some(0));
    let rows: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&json_out.stdout).trim()).unwrap();
    let csv_text = String::from_utf8_lossy(&csv_out.stdout).to_string();
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let records: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.as_array().unwrap().len(), records.len());
    for (row, rec) in rows.as_array().unwrap().iter().zip(&records) {
        assert_eq!(row["suite"].as_str().unwrap(), &rec[0]);
        assert_eq!(row["pass"].as_str().unwrap(), &rec[1]);
        assert_eq!(row["size"].as_u64().unwrap().to_string(), rec[2]);
        assert_eq!(row["bytes_read_total"].as_u64().unwrap().to_string(), rec[10]);
    }
}
