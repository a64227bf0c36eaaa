use std::path::Path;
use std::process::{Command, Output};

use lieq::report::{read_document, DiagnosticsFile, PlanFile};
use lieq_core::EvalReport;

const SMALL: &[&str] = &[
    "--layers", "3", "--dim", "32", "--heads", "2", "--ff", "32", "--vocab", "32",
    "--hot-layer", "1", "--corpus-ranges", "33-40", "--corpus-passages", "3",
];
const BUCKETS: &[&str] = &["--buckets", "33-40", "--passages", "3"];

fn lieq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lieq")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lieq(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = lieq(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: Vec<String>) -> String {
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn fixture(dir: &Path) {
    run(dir, with(&["fixture"], SMALL));
}

fn diagnose(dir: &Path) {
    run(dir, with(&["diagnose", "--model", "model.ckpt", "--corpus", "corpus.corp"], BUCKETS));
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    diagnose(dir);
    let alloc = ok(dir, &["allocate"]);
    assert!(alloc.contains("S_hi = [1]"), "{alloc}");
    assert!(alloc.contains("avg_bits = 2.6667"));
    let plan: PlanFile = read_document(&dir.join("plan.json")).unwrap();
    assert_eq!(plan.layers.iter().map(|l| l.bits).collect::<Vec<_>>(), vec![2, 4, 2]);

    let quant = ok(dir, &["quantize", "--model", "model.ckpt", "--group-size", "32"]);
    assert!(quant.contains("layer   1   4 bits"));
    let bytes = std::fs::read(dir.join("model.lieqq")).unwrap();
    assert_eq!(lieq::qformat::peek_group_size(&bytes).unwrap(), 32);

    let summary = ok(dir, &["eval", "--model", "model.ckpt", "--corpus", "corpus.corp", "--diagnostics", "diagnostics.json"]);
    let first = summary.lines().next().unwrap();
    assert!(first.starts_with("ppl_fp=") && first.contains(" ppl_quant=") && first.contains(" avg_bits=2.6667 cr="));
    let report: EvalReport = read_document(&dir.join("report.json")).unwrap();
    assert!(report.ppl_fp > 1.0 && report.ppl_quant > 1.0);
    assert_eq!(report.plan.group_size, 32);
    assert_eq!(report.correlations.len(), 1);

    ok(dir, &["eval", "--model", "model.ckpt", "--corpus", "corpus.corp", "--format", "csv"]);
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("ppl_fp,ppl_quant,"));
    assert_eq!(csv.lines().count(), 2);
    fails(dir, &["eval", "--model", "model.ckpt", "--corpus", "corpus.corp", "--format", "xml"], 2);
}

#[test]
fn commands_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let a = run(dir, with(&["fixture", "--seed", "7"], SMALL));
    let b = run(dir, with(&["fixture", "--seed", "7"], SMALL));
    assert_eq!(a, b);
    diagnose(dir);
    let first = std::fs::read(dir.join("diagnostics.json")).unwrap();
    diagnose(dir);
    assert_eq!(first, std::fs::read(dir.join("diagnostics.json")).unwrap());
    let c = run(dir, with(&["fixture", "--seed", "8"], SMALL));
    assert_ne!(a, c);
}

#[test]
fn k_flag_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    run(dir, with(&["diagnose", "--model", "model.ckpt", "--corpus", "corpus.corp", "--k", "4"], BUCKETS));
    let d: DiagnosticsFile = read_document(&dir.join("diagnostics.json")).unwrap();
    assert!(d.buckets.iter().all(|b| b.provenance.k == 4));
}

#[test]
fn input_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    let msg = fails(dir, &["diagnose", "--model", "model.ckpt", "--corpus", "nowhere.corp"], 2);
    assert!(msg.contains("nowhere.corp"), "{msg}");
    let msg = fails(dir, &["diagnose", "--corpus", "corpus.corp"], 2);
    assert!(msg.contains("model"), "{msg}");
    fails(dir, &["fixture", "--layers", "0"], 2);
    fails(dir, &["fixture", "--dim", "4096"], 2);
    fails(dir, &["fixture", "--bogus"], 2);

    diagnose(dir);
    let msg = fails(dir, &["allocate", "--weights", "0.5,0.2,0.2"], 2);
    assert!(msg.contains("weights"), "{msg}");
    fails(dir, &["allocate", "--m", "9"], 2);

    std::fs::write(dir.join("broken.json"), "{\"kind\": \"plan\"}").unwrap();
    fails(dir, &["allocate", "--diagnostics", "broken.json"], 2);
}

#[test]
fn weights_select_the_driving_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    diagnose(dir);
    ok(dir, &["allocate", "--weights", "1,0,0"]);
    let plan: PlanFile = read_document(&dir.join("plan.json")).unwrap();
    let d: DiagnosticsFile = read_document(&dir.join("diagnostics.json")).unwrap();
    let mean: Vec<f64> = (0..3).map(|l| d.buckets.iter().map(|b| b.layers[l].delta_ppl).sum::<f64>()).collect();
    let max = mean.iter().cloned().fold(f64::MIN, f64::max);
    for (l, layer) in plan.layers.iter().enumerate() {
        assert!((layer.score - mean[l].max(0.0) / max).abs() < 1e-12);
    }
}

#[test]
fn degenerate_metric_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    diagnose(dir);
    let text = std::fs::read_to_string(dir.join("diagnostics.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for b in v["buckets"].as_array_mut().unwrap() {
        for l in b["layers"].as_array_mut().unwrap() {
            l["delta_ppl"] = serde_json::json!(-1.0);
        }
    }
    std::fs::write(dir.join("flat.json"), v.to_string()).unwrap();
    let msg = fails(dir, &["allocate", "--diagnostics", "flat.json"], 3);
    assert!(msg.contains("delta_ppl"), "{msg}");
}

#[test]
fn model_mismatches_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    diagnose(dir);
    ok(dir, &["allocate"]);
    run(dir, with(&["fixture", "--seed", "1", "--model", "other.ckpt", "--corpus", "other.corp"], SMALL));
    let msg = fails(dir, &["quantize", "--model", "other.ckpt"], 2);
    assert!(msg.contains("plan was made for model"), "{msg}");

    ok(dir, &["quantize", "--model", "model.ckpt"]);
    fails(dir, &["eval", "--model", "other.ckpt", "--corpus", "corpus.corp"], 2);
    run(dir, with(&["fixture", "--layers", "2", "--model", "two.ckpt", "--corpus", "two.corp"], &SMALL[2..]));
    fails(dir, &["eval", "--model", "two.ckpt", "--corpus", "corpus.corp"], 2);

    // Token 40 is outside the 32-entry vocabulary.
    let mut bad = b"LIEQCORP".to_vec();
    for v in [1u32, 64, 2, 3, 40] {
        bad.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join("bad.corp"), bad).unwrap();
    fails(dir, &["eval", "--model", "model.ckpt", "--corpus", "bad.corp"], 2);
}

#[test]
fn sweep_writes_stable_outputs_and_clamps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    diagnose(dir);
    let args = ["sweep", "--model", "model.ckpt", "--corpus", "corpus.corp", "--diagnostics", "diagnostics.json", "--m-range", "0..3"];
    ok(dir, &args);
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let json = std::fs::read(dir.join("sweep.json")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,avg_bits,ppl_quant");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,2,") && lines[4].starts_with("3,4,"));
    ok(dir, &args);
    assert_eq!(csv, std::fs::read_to_string(dir.join("sweep.csv")).unwrap());
    assert_eq!(json, std::fs::read(dir.join("sweep.json")).unwrap());

    run(dir, with(&["fixture", "--layers", "1", "--hot-layer", "0", "--model", "one.ckpt", "--corpus", "one.corp"], &[&SMALL[2..10], &SMALL[12..]].concat()));
    let msg = String::from_utf8(
        lieq(dir, &["sweep", "--model", "one.ckpt", "--corpus", "one.corp", "--buckets", "33-40", "--passages", "3", "--k", "2", "--m-range", "1..16"])
            .stderr,
    )
    .unwrap();
    assert!(msg.contains("warning: m range 1..16 exceeds the 1-layer model; using 1..1"), "{msg}");
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,4,"));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    std::fs::write(
        dir.join("run.conf"),
        "# shared settings\nmodel = model.ckpt\ncorpus = corpus.corp\nbuckets = 33-40\npassages = 3\nk = 2\nseed = 5\n",
    )
    .unwrap();
    ok(dir, &["diagnose", "--config", "run.conf"]);
    let d: DiagnosticsFile = read_document(&dir.join("diagnostics.json")).unwrap();
    assert_eq!((d.buckets[0].provenance.k, d.buckets[0].provenance.seed), (2, 5));
    ok(dir, &["diagnose", "--config", "run.conf", "--k", "3"]);
    let d: DiagnosticsFile = read_document(&dir.join("diagnostics.json")).unwrap();
    assert_eq!((d.buckets[0].provenance.k, d.buckets[0].provenance.seed), (3, 5));

    std::fs::write(dir.join("bad.conf"), "colour = blue\n").unwrap();
    let msg = fails(dir, &["diagnose", "--config", "bad.conf"], 2);
    assert!(msg.contains("colour"));
    std::fs::write(dir.join("badval.conf"), "seed = many\n").unwrap();
    let msg = fails(dir, &["diagnose", "--config", "badval.conf", "--model", "model.ckpt", "--corpus", "corpus.corp"], 2);
    assert!(msg.contains("seed"));
}

#[test]
fn threads_flag_and_env() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    run(dir, with(&["diagnose", "--model", "model.ckpt", "--corpus", "corpus.corp", "--threads", "2"], BUCKETS));
    let a = std::fs::read(dir.join("diagnostics.json")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lieq"))
        .current_dir(dir)
        .env("LIEQ_THREADS", "1")
        .args(["diagnose", "--model", "model.ckpt", "--corpus", "corpus.corp"])
        .args(BUCKETS)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(a, std::fs::read(dir.join("diagnostics.json")).unwrap());
    fails(dir, &["diagnose", "--threads", "0", "--model", "model.ckpt", "--corpus", "corpus.corp"], 2);
}

#[test]
fn help_lists_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let h = ok(dir, &["allocate", "--help"]);
    for s in ["--weights", "[default: 1/3,1/3,1/3]", "--m", "[default: 1]", "--b-hi", "[default: 4]", "--b-lo", "[default: 2]"] {
        assert!(h.contains(s), "{s} missing from\n{h}");
    }
    let h = ok(dir, &["diagnose", "--help"]);
    assert!(h.contains("[default: 33-128,129-512]") && h.contains("[default: 100]"));
    let h = ok(dir, &["quantize", "--help"]);
    assert!(h.contains("[default: 64]"));
    for sub in ["fixture", "eval", "sweep"] {
        assert!(ok(dir, &[sub, "--help"]).contains("--config"));
    }
}
