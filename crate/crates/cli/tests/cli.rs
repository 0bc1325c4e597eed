use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[generate]
n_sentences = 80

[encoder]
d = 8
layers = 4
heads = 2
ffn_mult = 2

[dora]
k = 3

[acbs]
heads = 2

[train]
epochs = 2
batch_size = 16

[probes]
seeds = [1, 2, 3]

[workload]
rate = 40.0
duration = 1.0
length_dist = [[24, 1.0]]
"#;

fn dabs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dabs")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dabs(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    corpus: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let gen = root.join("gen");
    ok(&["generate", "--config", s(&config), "--seed", "5", "--out", s(&gen)]);
    Fixture { _dir: dir, corpus: gen.join("corpus.jsonl"), root, config }
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr must be one line: {err}");
    serde_json::from_str(err.trim()).unwrap()
}

#[test]
fn generate_is_deterministic_and_writes_manifest() {
    let f = fixture();
    let again = f.root.join("gen2");
    ok(&["generate", "--config", s(&f.config), "--seed", "5", "--out", s(&again)]);
    assert_eq!(fs::read(&f.corpus).unwrap(), fs::read(again.join("corpus.jsonl")).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(again.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["n_sentences"], 80);
    assert!(again.join("resolved-config.toml").exists());
}

#[test]
fn stats_on_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    fs::write(
        &data,
        concat!(
            r#"{"id":"a","text":"good food","aspects":[{"from_char":5,"to_char":9,"term":"food","label":"positive"}]}"#,
            "\n",
            r#"{"id":"b","text":"food ok service bad","aspects":[{"from_char":0,"to_char":4,"term":"food","label":"neutral"},{"from_char":8,"to_char":15,"term":"service","label":"negative"}]}"#,
            "\n",
            r#"{"id":"c","text":"x y z","aspects":[{"from_char":0,"to_char":1,"term":"x","label":"positive"},{"from_char":2,"to_char":3,"term":"y","label":"positive"},{"from_char":4,"to_char":5,"term":"z","label":"negative"}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = ok(&["stats", "--data", s(&data), "--out", s(dir.path())]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["avg_m"], 2.0);
    assert_eq!(v["class_counts"], serde_json::json!([3, 1, 2]));
}

#[test]
fn exit_codes_and_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dabs(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "usage");

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let out = dabs(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "input");

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json}\n").unwrap();
    let out = dabs(&["stats", "--data", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    stderr_json(&out);

    let out = dabs(&["probe", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "config");

    let out = dabs(&["generate", "--threads", "0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_eval_reproduces_best_metric() {
    let f = fixture();
    let run = f.root.join("run");
    let out = ok(&["train", "--config", s(&f.config), "--data", s(&f.corpus), "--seed", "1", "--out", s(&run)]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for file in ["checkpoint.bin", "model.json", "vocab.json", "metrics.csv", "test.jsonl", "resolved-config.toml"] {
        assert!(run.join(file).exists(), "{file} missing");
    }
    let ev_dir = f.root.join("eval");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&run),
        "--data",
        s(&run.join("test.jsonl")),
        "--out",
        s(&ev_dir),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["macro_f1"], summary["best"]["macro_f1"]);
    assert_eq!(report["accuracy"], summary["best"]["accuracy"]);

    // replaying the resolved config reproduces the eval output byte for byte
    let replay = f.root.join("replay");
    ok(&["eval", "--config", s(&ev_dir.join("resolved-config.toml")), "--out", s(&replay)]);
    assert_eq!(fs::read(ev_dir.join("eval.json")).unwrap(), fs::read(replay.join("eval.json")).unwrap());

    let tr = f.root.join("trace");
    ok(&["trace", "--checkpoint", s(&run), "--data", s(&run.join("test.jsonl")), "--out", s(&tr)]);
    let first = fs::read_to_string(tr.join("traces.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(rec["alpha"].as_array().unwrap().len(), 3);
}

#[test]
fn ablation_probe_uses_table_labels() {
    let f = fixture();
    let out_dir = f.root.join("abl");
    ok(&[
        "probe",
        "--config",
        s(&f.config),
        "--data",
        s(&f.corpus),
        "--epochs",
        "1",
        "--ablate",
        "token_sel",
        "--out",
        s(&out_dir),
    ]);
    let mut rdr = csv::Reader::from_path(out_dir.join("ablations.csv")).unwrap();
    let configs: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(configs, vec!["Full", "- Token Sel."]);
}

#[test]
fn paired_recipe_reports_delta_t_p() {
    let f = fixture();
    let out_dir = f.root.join("paired");
    ok(&["probe", "--config", s(&f.config), "--data", s(&f.corpus), "--paired", "--out", s(&out_dir)]);
    let mut rdr = csv::Reader::from_path(out_dir.join("paired.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    for col in ["delta", "t", "p"] {
        assert!(headers.iter().any(|h| h == col), "missing column {col}");
    }
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    let runs = fs::read_to_string(out_dir.join("paired_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 3);
}

#[test]
fn simulated_bench_is_replayable() {
    let f = fixture();
    let a = f.root.join("bench_a");
    ok(&["bench", "--config", s(&f.config), "--mode", "simulated", "--out", s(&a)]);
    let sweep = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 17);
    let b = f.root.join("bench_b");
    ok(&["bench", "--config", s(&a.join("resolved-config.toml")), "--out", s(&b)]);
    assert_eq!(fs::read(a.join("sweep.csv")).unwrap(), fs::read(b.join("sweep.csv")).unwrap());
    assert_eq!(fs::read(a.join("bench.json")).unwrap(), fs::read(b.join("bench.json")).unwrap());
}

#[test]
fn depth_probes_and_real_bench_run() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.corpus), "--out", s(&run)]);
    let reg = f.root.join("regions");
    ok(&["probe", "--regions", "--checkpoint", s(&run), "--data", s(&run.join("test.jsonl")), "--out", s(&reg)]);
    let csv = fs::read_to_string(reg.join("regions.csv")).unwrap();
    assert!(csv.starts_with("config,base_mf1,shallow_mf1,middle_mf1,deep_mf1,delta,best_region"));
    let r2: serde_json::Value = serde_json::from_str(&fs::read_to_string(reg.join("rand2l.json")).unwrap()).unwrap();
    assert_eq!(r2["trials"].as_array().unwrap().len(), 20);

    let cfg = f.root.join("order.toml");
    fs::write(&cfg, format!("{TINY}\n[probes.stress]\nnegation_min_len = 0\n").replace("seeds = [1, 2, 3]", "seeds = [1]"))
        .unwrap();
    let ord = f.root.join("order");
    ok(&["probe", "--config", s(&cfg), "--data", s(&f.corpus), "--layer-order", "--epochs", "1", "--out", s(&ord)]);
    let rows = fs::read_to_string(ord.join("layer_order.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 + 3);

    let bench = f.root.join("real");
    ok(&["bench", "--config", s(&f.config), "--mode", "real", "--checkpoint", s(&run), "--m", "1,4", "--out", s(&bench)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(bench.join("bench.json")).unwrap()).unwrap();
    assert_eq!(v["nonreuse_pays_dora"], true);
    assert_eq!(v["sweep"].as_array().unwrap().len(), 2);
}
