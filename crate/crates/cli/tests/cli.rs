use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn spjoin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spjoin")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn four_rows(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("ex1.csv");
    fs::write(&path, "0,16,35,5,32,31,14,10,11\n1,15,33,2,35,29,13,11,12\n2,10,27,8,26,37,23,15,13\n3,9,30,4,25,34,25,18,14\n").unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn join_four_rows() {
    let dir = TempDir::new().unwrap();
    let input = four_rows(&dir);
    let out = dir.path().join("pairs.csv");
    let o = spjoin(&["join", "--input", s(&input), "--metric", "l1", "--delta", "30", "--nodes", "1", "--partitions", "2", "--seed", "7", "--output", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&out).unwrap(), "id_a,id_b,distance\n0,1,14\n2,3,18\n");
}

#[test]
fn join_prints_to_stdout_without_output() {
    let dir = TempDir::new().unwrap();
    let input = four_rows(&dir);
    let o = spjoin(&["join", "--input", s(&input), "--metric", "l1", "--delta", "30", "--nodes", "1", "--partitions", "2"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "id_a,id_b,distance\n0,1,14\n2,3,18\n");
}

#[test]
fn oracle_matches_join_and_is_stable() {
    let dir = TempDir::new().unwrap();
    let input = four_rows(&dir);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = spjoin(&["oracle", "--input", s(&input), "--metric", "l1", "--delta", "30", "--output", s(out)]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap(), "id_a,id_b,distance\n0,1,14\n2,3,18\n");

    let empty = dir.path().join("e.csv");
    assert!(spjoin(&["oracle", "--input", s(&input), "--metric", "l1", "--delta", "0", "--output", s(&empty)]).status.success());
    assert_eq!(fs::read_to_string(&empty).unwrap(), "id_a,id_b,distance\n");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = spjoin(&["join", "--input", s(&missing), "--metric", "l1", "--delta", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));

    assert_eq!(spjoin(&["join", "--bogus"]).status.code(), Some(1));
    assert_eq!(spjoin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(spjoin(&["--help"]).status.code(), Some(0));
    let input = four_rows(&dir);
    // Invalid configuration: p > k.
    let o = spjoin(&["join", "--input", s(&input), "--metric", "l1", "--k", "2", "--partitions", "3"]);
    assert_eq!(o.status.code(), Some(1));
    // Metric / payload mismatch is a usage error.
    let o = spjoin(&["join", "--input", s(&input), "--metric", "edit", "--payload", "vector"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_echoes_config_and_reproduces() {
    let dir = TempDir::new().unwrap();
    let input = four_rows(&dir);
    let report = dir.path().join("r.json");
    let first = dir.path().join("1.csv");
    let o = spjoin(&[
        "join", "--input", s(&input), "--metric", "l1", "--delta", "30", "--nodes", "1", "--partitions", "2",
        "--sampling", "generative", "--k", "3200", "--report", s(&report), "--output", s(&first),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&report);
    assert_eq!(r["config"]["sample_size"], 3200);
    assert_eq!(r["config"]["sampling"], "generative");
    assert!(r["cost"]["max_verifications"].is_u64());

    // Re-run from the echoed config.
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, serde_json::to_string(&r["config"]).unwrap()).unwrap();
    let second = dir.path().join("2.csv");
    assert!(spjoin(&["join", "--config", s(&cfg), "--input", s(&input), "--output", s(&second)]).status.success());
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let input = four_rows(&dir);
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("p.csv");
    fs::write(&cfg, format!(r#"{{"input": "{}", "metric": "l1", "delta": 1000, "nodes": 1, "partitions": 2, "output": "{}"}}"#, s(&input), s(&out))).unwrap();
    assert!(spjoin(&["join", "--config", s(&cfg)]).status.success());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 7);
    assert!(spjoin(&["join", "--config", s(&cfg), "--delta", "30"]).status.success());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 3);

    fs::write(&cfg, r#"{"metric": "l1", "unknown_knob": 3}"#).unwrap();
    assert_eq!(spjoin(&["join", "--config", s(&cfg), "--input", s(&input)]).status.code(), Some(1));
}

#[test]
fn gen_vectors() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = spjoin(&["gen", "--count", "1000", "--dim", "2", "--component", "1:normal:0,1", "--seed", "5", "--output", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1000);
    assert!(text.lines().all(|l| l.split(',').count() == 3));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = json(&dir.path().join("a.csv.manifest.json"));
    assert_eq!(m["counts"][0], 1000);

    let mix = dir.path().join("mix.csv");
    let o = spjoin(&["gen", "-n", "1000", "--component", "0.9:normal:0,1", "--component", "0.1:normal:10,1", "--output", s(&mix)]);
    assert!(o.status.success());
    let m = json(&dir.path().join("mix.csv.manifest.json"));
    let c0 = m["counts"][0].as_f64().unwrap();
    assert!((c0 - 900.0).abs() <= 5.0 * (1000.0f64 * 0.09).sqrt());

    assert_eq!(spjoin(&["gen", "--component", "nonsense", "--output", s(&mix)]).status.code(), Some(1));
}

#[test]
fn gen_strings_and_sets_feed_join() {
    let dir = TempDir::new().unwrap();
    for (kind, metric, delta) in [("string", "edit", "2"), ("set", "jaccard", "0.4")] {
        let data = dir.path().join(format!("{kind}.txt"));
        assert!(spjoin(&["gen", "--kind", kind, "-n", "200", "--output", s(&data)]).status.success());
        let j = dir.path().join(format!("{kind}-join.csv"));
        let o = dir.path().join(format!("{kind}-oracle.csv"));
        let common = ["--input", s(&data), "--metric", metric, "--delta", delta];
        let args: Vec<&str> = ["join"].iter().copied().chain(common).chain(["--nodes", "3", "--k", "40", "-p", "4", "--target-dim", "3", "--output", s(&j)]).collect();
        let out = spjoin(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let args: Vec<&str> = ["oracle"].iter().copied().chain(common).chain(["--output", s(&o)]).collect();
        assert!(spjoin(&args).status.success());
        assert_eq!(fs::read(&j).unwrap(), fs::read(&o).unwrap());
        let diff = spjoin(&["report-diff", s(&j), s(&o)]);
        assert!(String::from_utf8_lossy(&diff.stdout).contains(&format!("only in {}: 0", s(&j))));
    }
}

#[test]
fn sample_generative_and_distribution_aware() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    assert!(spjoin(&["gen", "-n", "4000", "--dim", "2", "--component", "1:normal:0,1", "--component", "1:gamma:2,1", "--skew", "0,0,1,1", "--seed", "3", "--output", s(&data)]).status.success());
    let manifest = dir.path().join("d.csv.manifest.json");

    let pivots = dir.path().join("piv.csv");
    let report = dir.path().join("s.json");
    let o = spjoin(&[
        "sample", "--input", s(&data), "--metric", "euclidean", "--sampling", "generative", "--k", "100", "--nodes", "4",
        "--partitions", "4", "--output", s(&pivots), "--report", s(&report), "--manifest", s(&manifest),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&pivots).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert!(text.lines().all(|l| l.ends_with(",generated")));
    let r = json(&report);
    let err = r["sampling_error"].as_f64().unwrap();
    assert!(err > 0.0 && err < 1.0);

    let o = spjoin(&[
        "sample", "--input", s(&data), "--metric", "euclidean", "--sampling", "distribution_aware", "--k", "100", "--nodes", "4",
        "--partitions", "4", "--output", s(&pivots), "--report", s(&report),
    ]);
    assert!(o.status.success());
    let r = json(&report);
    // Recompute the allocation N_i / c_i with largest-remainder rounding.
    let nodes = r["nodes"].as_array().unwrap();
    let weights: Vec<f64> = nodes.iter().map(|n| n["cardinality"].as_f64().unwrap() / n["confidence"].as_f64().unwrap().max(1e-6)).collect();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| 100.0 * w / total).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = 100 - alloc.iter().sum::<usize>();
    for &i in &order[..short] {
        alloc[i] += 1;
    }
    let reported: Vec<usize> = nodes.iter().map(|n| n["allocated"].as_u64().unwrap() as usize).collect();
    assert_eq!(reported, alloc);
    let per_node: Vec<usize> = (0..4).map(|i| fs::read_to_string(&pivots).unwrap().lines().filter(|l| l.ends_with(&format!(",node:{i}"))).count()).collect();
    assert_eq!(per_node, alloc);
}

#[test]
fn report_diff_lists_differences() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "id_a,id_b,distance\n0,1,1\n2,3,1\n").unwrap();
    fs::write(&b, "id_a,id_b,distance\n0,1,1\n4,5,2\n").unwrap();
    let o = spjoin(&["report-diff", s(&a), s(&b)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("common: 1"));
    assert!(text.contains("< 2,3"));
    assert!(text.contains("> 4,5"));
}
