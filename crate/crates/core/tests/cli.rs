//! Contract tests for the `noisefacts` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

use noisefacts::corpus::toy::{toy_kg, toy_narratives};
use noisefacts::corpus::{write_kg, write_narratives};

const QUICK: &str = r#"{
  "seed": 3,
  "embedder": {"epochs": 5},
  "diffuser": {"train_steps": 40, "adapt_every": 20, "log_every": 10},
  "entity": {"heads": {"train_steps": 20, "adapt_every": 10, "log_every": 10},
             "tails": {"train_steps": 20, "log_every": 10}, "classifier": {"epochs": 2}},
  "relevance": {"epochs": 2}
}"#;

/// Corpus, a pretrained fact embedder, a trained diffuser and one
/// generations file, built once and shared by every test.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn nf(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisefacts")).args(args).env_remove("NOISEFACTS_SEED").output().unwrap()
}

fn run(args: &[&str]) -> Output {
    let paths: Vec<&Path> = args.iter().map(Path::new).collect();
    nf(&paths)
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let kg = toy_kg(60, 3, 4);
        write_kg(&root.join("kg.jsonl"), &kg).unwrap();
        write_narratives(&root.join("narratives.jsonl"), &toy_narratives(&kg, 6, 5)).unwrap();
        fs::write(root.join("quick.json"), QUICK).unwrap();
        let f = Fixture { _dir: dir, root };
        let (cfg, kg, narr) = (f.p("quick.json"), f.p("kg.jsonl"), f.p("narratives.jsonl"));
        ok(&["--config", s(&cfg), "pretrain-embedder", "--kg", s(&kg), "--narratives", s(&narr), "--out", s(&f.p("emb"))]);
        ok(&["--config", s(&cfg), "train", "--embedder", s(&f.p("emb")), "--narratives", s(&narr), "--out", s(&f.p("fact"))]);
        ok(&[
            "--config", s(&cfg), "generate", "--embedder", s(&f.p("emb")), "--model", s(&f.p("fact")),
            "--narratives", s(&narr), "--out", s(&f.p("gen.jsonl")), "--steps", "10",
        ]);
        f
    })
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn write_lines(p: &Path, v: &[Value]) {
    let text: String = v.iter().map(|x| format!("{}\n", serde_json::to_string(x).unwrap())).collect();
    fs::write(p, text).unwrap();
}

fn evaluate(gen: &Path, out: &Path, extra: &[&str]) -> Output {
    let f = fixture();
    let gold = f.p("narratives.jsonl");
    let mut args = vec!["evaluate", "--generations", s(gen), "--gold", s(&gold), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

fn csv_rows(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count() - 1
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = run(&["pretrain-embedder", "--kg", "/nonexistent/kg.jsonl", "--narratives", "/nonexistent/n.jsonl", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fact_mode_writes_checkpoint_and_logs() {
    let f = fixture();
    for name in ["embedder", "vocab.json", "catalog.json", "run.json", "pretrain_report.json", "loss.csv"] {
        assert!(f.p("emb").join(name).exists(), "embedder run lacks {name}");
    }
    assert_eq!(csv_rows(&f.p("emb/loss.csv")), 5);
    let fact = f.p("fact");
    for name in ["diffuser", "run.json", "loss.csv", "schedules"] {
        assert!(fact.join(name).exists(), "fact run lacks {name}");
    }
    assert_eq!(csv_rows(&fact.join("loss.csv")), 4);
    assert_eq!(fs::read_dir(fact.join("schedules")).unwrap().count(), 2);
    let run: Value = serde_json::from_str(&fs::read_to_string(fact.join("run.json")).unwrap()).unwrap();
    let emb_run: Value = serde_json::from_str(&fs::read_to_string(f.p("emb/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["upstream"]["embedder"], emb_run["config_hash"]);
}

#[test]
fn entity_and_relevance_modes_write_checkpoints() {
    let f = fixture();
    let (cfg, kg, narr) = (f.p("quick.json"), f.p("kg.jsonl"), f.p("narratives.jsonl"));
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&[
        "--config", s(&cfg), "pretrain-embedder", "--kg", s(&kg), "--narratives", s(&narr), "--out", s(&d("emb")),
        "--units", "entities",
    ]);
    // A fact-mode diffuser needs a fact embedder.
    let wrong = run(&["train", "--embedder", s(&d("emb")), "--narratives", s(&narr), "--out", s(&d("x"))]);
    assert_eq!(wrong.status.code(), Some(2));

    ok(&["--config", s(&cfg), "train", "--embedder", s(&d("emb")), "--narratives", s(&narr), "--out", s(&d("ent")), "--mode", "entity"]);
    for name in ["heads", "tails", "relations", "run.json"] {
        assert!(d("ent").join(name).exists(), "entity run lacks {name}");
    }
    assert_eq!(csv_rows(&d("ent/loss_heads.csv")), 2);
    assert_eq!(csv_rows(&d("ent/loss_tails.csv")), 2);
    assert_eq!(csv_rows(&d("ent/loss_relations.csv")), 2);
    ok(&[
        "--config", s(&cfg), "generate", "--embedder", s(&d("emb")), "--model", s(&d("ent")), "--narratives", s(&narr),
        "--out", s(&d("gen.jsonl")), "--steps", "5",
    ]);
    assert_eq!(lines(&d("gen.jsonl")).len(), 6);

    ok(&[
        "--config", s(&cfg), "train", "--embedder", s(&f.p("emb")), "--narratives", s(&narr), "--out", s(&d("rel")),
        "--mode", "relevance",
    ]);
    assert!(d("rel/relevance").exists());
    assert_eq!(csv_rows(&d("rel/loss.csv")), 2);
    let out = evaluate(
        &f.p("gen.jsonl"),
        &d("ev"),
        &["--scorer", "classifier", "--relevance-model", s(&d("rel"))],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generation_honours_step_count_and_fact_cap() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let narr = f.p("narratives.jsonl");
    for (steps, cap) in [("10", "1"), ("200", "3")] {
        let out = dir.path().join(format!("g{steps}.jsonl"));
        ok(&[
            "--config", s(&f.p("quick.json")), "generate", "--embedder", s(&f.p("emb")), "--model", s(&f.p("fact")),
            "--narratives", s(&narr), "--out", s(&out), "--steps", steps, "--max-facts", cap,
        ]);
        let recs = lines(&out);
        assert_eq!(recs.len(), 6);
        for r in &recs {
            assert_eq!(r["inference_steps"].as_u64().unwrap().to_string(), steps);
            assert!(r["facts"].as_array().unwrap().len() <= cap.parse().unwrap());
        }
    }
    let bad = run(&[
        "generate", "--embedder", s(&f.p("emb")), "--model", s(&f.p("fact")), "--narratives", s(&narr),
        "--out", s(&dir.path().join("bad.jsonl")), "--steps", "201",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

/// Generations equal to the gold sets, carrying the fixture's hash.
fn gold_generations(path: &Path) {
    let f = fixture();
    let gold = lines(&f.p("narratives.jsonl"));
    let mut recs = lines(&f.p("gen.jsonl"));
    for (r, g) in recs.iter_mut().zip(&gold) {
        r["facts"] = g["facts"].clone();
    }
    write_lines(path, &recs);
}

#[test]
fn perfect_generations_align_fully_and_averages_rederive() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gold_gen.jsonl");
    gold_generations(&gen);
    let out = evaluate(&gen, &dir.path().join("ev"), &["--geometry", "both", "--embedder", s(&fixture().p("emb")), "--webnlg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/report.json")).unwrap()).unwrap();
    let geoms = rep["geometries"].as_array().unwrap();
    assert_eq!(geoms.len(), 2);
    assert_eq!(geoms[0]["geometry"], "edit");
    assert_eq!(geoms[1]["geometry"], "embedding");
    for g in geoms {
        assert!((g["corpus"]["alignment"].as_f64().unwrap() - 1.0).abs() < 1e-9);
        let contexts = g["contexts"].as_array().unwrap();
        let mut sum = 0.0;
        for c in contexts {
            let recs = c["records"].as_array().unwrap();
            let mean: f64 = recs.iter().map(|r| r["alignment"].as_f64().unwrap()).sum::<f64>() / recs.len() as f64;
            assert!((mean - c["mean"]["alignment"].as_f64().unwrap()).abs() < 1e-12);
            let nc: f64 = recs.iter().map(|r| r["n_clusters"].as_f64().unwrap()).sum::<f64>() / recs.len() as f64;
            assert!((nc - c["mean"]["n_clusters"].as_f64().unwrap()).abs() < 1e-12);
            sum += c["mean"]["n_clusters"].as_f64().unwrap();
        }
        assert!((sum / contexts.len() as f64 - g["corpus"]["n_clusters"].as_f64().unwrap()).abs() < 1e-12);
    }
    assert!((rep["webnlg"]["strict"]["f1"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let md = fs::read_to_string(dir.path().join("ev/report.md")).unwrap();
    assert!(md.contains("edit") && md.contains("embedding"));
}

#[test]
fn mixed_hashes_are_refused_unless_forced() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut recs = lines(&f.p("gen.jsonl"));
    recs[2]["config_hash"] = Value::from("0".repeat(64));
    let mixed = dir.path().join("mixed.jsonl");
    write_lines(&mixed, &recs);
    let refused = evaluate(&mixed, &dir.path().join("a"), &[]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("config hash"));
    let forced = evaluate(&mixed, &dir.path().join("b"), &["--force"]);
    assert!(forced.status.success(), "{}", String::from_utf8_lossy(&forced.stderr));
}

#[test]
fn misaligned_generations_name_the_context() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut recs = lines(&f.p("gen.jsonl"));
    recs.swap(3, 4);
    let path = dir.path().join("swapped.jsonl");
    write_lines(&path, &recs);
    let out = evaluate(&path, &dir.path().join("ev"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("context id 3"));
}

#[test]
fn webnlg_score_prints_three_regimes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gold_gen.jsonl");
    gold_generations(&gen);
    let out = ok(&["webnlg-score", "--generations", s(&gen), "--gold", s(&f.p("narratives.jsonl"))]);
    for regime in ["strict", "exact", "partial"] {
        assert!(out.contains(regime), "missing {regime} in {out}");
    }
}

#[test]
fn inspect_schedule_reads_checkpoints() {
    let f = fixture();
    let out = ok(&["inspect-schedule", s(&f.p("fact/diffuser")), "--at", "0,200"]);
    assert!(out.starts_with("T = 200"));
    assert!(out.lines().any(|l| l.starts_with("0\t0.990000")));
    let dump = ok(&["inspect-schedule", s(&f.p("fact/diffuser")), "--json"]);
    assert!(serde_json::from_str::<Value>(&dump).unwrap().is_array());
    let bad = run(&["inspect-schedule", s(&f.p("fact/diffuser")), "--at", "201"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn seed_env_overrides_config_and_flag_overrides_env() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, env: Option<&str>, flag: Option<&str>| -> Value {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_noisefacts"));
        cmd.env_remove("NOISEFACTS_SEED");
        if let Some(v) = env {
            cmd.env("NOISEFACTS_SEED", v);
        }
        cmd.args(["--config", s(&f.p("quick.json"))]);
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        cmd.args(["generate", "--embedder", s(&f.p("emb")), "--model", s(&f.p("fact"))]);
        cmd.args(["--narratives", s(&f.p("narratives.jsonl")), "--out", s(&out), "--steps", "5"]);
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v = lines(&out);
        v[0].clone()
    };
    let from_config = gen("a.jsonl", None, None);
    let from_env = gen("b.jsonl", Some("11"), None);
    let from_flag = gen("c.jsonl", None, Some("11"));
    let both = gen("d.jsonl", Some("12"), Some("11"));
    assert_ne!(from_config["config_hash"], from_env["config_hash"]);
    assert_eq!(from_env["config_hash"], from_flag["config_hash"]);
    assert_eq!(from_flag["config_hash"], both["config_hash"]);
    assert_eq!(from_env["seed"], both["seed"]);
}
