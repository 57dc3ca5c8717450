use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn flowbo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowbo"))
        .args(args)
        .env_remove("FLOWBO_SEED")
        .env_remove("FLOWBO_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
[run]
budget = 12
n_init = 8
n_trust_regions = 2
queries_per_region = 3
n_cand = 30
topk = 16
seed = 3

[flow]
n_blocks = 1
layers_per_block = 2
embed_dim = 4
context_dim = 6
hidden_dim = 6
seq_len = 5
vocab_size = 5

[train]
epochs = 2
batch_size = 4

[gp]
projection_dim = 4
iterations = 5

[tacs]
n_mc = 2

[eval]
seeds = 2
anchors = 3
n_cand = 50
n_records = 40
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("exp.toml"), config).unwrap();
        fs::write(dir.path().join("corpus.txt"), "1 2 3 4 1\n2 2 3\n4 3 2 1 1\n\n1 1 1 1\n3 4\n").unwrap();
        Self { dir }
    }

    fn config(&self) -> String {
        self.path("exp.toml")
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn with_corpus(cfg: &str) -> String {
    format!("{cfg}\n[data]\ncorpus = \"corpus.txt\"\n")
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn fit_writes_checkpoint_and_reconstructs_corpus() {
    let fx = Fixture::new(&with_corpus(SMALL));
    let o = flowbo(&["fit", "-c", &fx.config(), "-o", &fx.path("fit")]);
    assert_ok(&o);
    let out = fx.out("fit");
    for f in ["flow.bin", "embeddings.bin", "training_log.jsonl", "fit_summary.json", "effective-config.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("training_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["reconstruction_rate"], 1.0);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fit_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["reconstruction_rate"], 1.0);
}

#[test]
fn fit_is_byte_identical_across_reruns_and_zero_epochs_keep_init() {
    let fx = Fixture::new(&with_corpus(SMALL));
    assert_ok(&flowbo(&["fit", "-c", &fx.config(), "-o", &fx.path("a")]));
    assert_ok(&flowbo(&["fit", "-c", &fx.config(), "-o", &fx.path("b")]));
    for f in ["flow.bin", "embeddings.bin", "training_log.jsonl"] {
        assert_eq!(read(&fx.out("a").join(f)), read(&fx.out("b").join(f)), "{f}");
    }
    let zero = Fixture::new(&with_corpus(&SMALL.replace("epochs = 2", "epochs = 0")));
    assert_ok(&flowbo(&["fit", "-c", &zero.config(), "-o", &zero.path("z")]));
    let model = flowbo::FlowModel::load(&zero.out("z").join("flow.bin")).unwrap();
    let table = flowbo::EmbeddingTable::load(&zero.out("z").join("embeddings.bin")).unwrap();
    let cfg = flowbo::config::ExperimentConfig::load(Path::new(&zero.config())).unwrap();
    let (m0, t0) = flowbo::boloop::initial_codec(&cfg.flow, cfg.run.seed).unwrap();
    assert_eq!(model, m0);
    assert_eq!(table, t0);
}

#[test]
fn config_errors_exit_with_code_two() {
    let fx = Fixture::new(SMALL);
    // No corpus configured.
    assert_eq!(flowbo(&["fit", "-c", &fx.config(), "-o", &fx.path("x")]).status.code(), Some(2));
    let missing = Fixture::new(&format!("{SMALL}\n[data]\ncorpus = \"nope.txt\"\n"));
    assert_eq!(flowbo(&["fit", "-c", &missing.config(), "-o", &missing.path("x")]).status.code(), Some(2));
    let bad_tok = Fixture::new(&with_corpus(SMALL));
    fs::write(bad_tok.out("corpus.txt"), "1 2 9\n").unwrap();
    assert_eq!(flowbo(&["fit", "-c", &bad_tok.config(), "-o", &bad_tok.path("x")]).status.code(), Some(2));
    let bad = Fixture::new(&SMALL.replace("n_init = 8", "n_init = 0"));
    assert_eq!(flowbo(&["optimize", "-c", &bad.config(), "-o", &bad.path("x")]).status.code(), Some(2));
    let unknown = Fixture::new(&format!("{SMALL}\n[bogus]\nx = 1\n"));
    assert_eq!(flowbo(&["optimize", "-c", &unknown.config(), "-o", &unknown.path("x")]).status.code(), Some(2));
    assert_eq!(flowbo(&["optimize", "-c", "/nonexistent/exp.toml"]).status.code(), Some(2));
}

#[test]
fn zero_budget_writes_initial_design_only() {
    let fx = Fixture::new(&SMALL.replace("budget = 12", "budget = 0"));
    assert_ok(&flowbo(&["optimize", "-c", &fx.config(), "-o", &fx.path("run")]));
    let csv = fs::read_to_string(fx.out("run").join("best_so_far.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("call_index,best_y"));
    assert_eq!(lines.count(), 8);
}

#[test]
fn optimize_is_deterministic_per_seed() {
    let fx = Fixture::new(SMALL);
    assert_ok(&flowbo(&["optimize", "-c", &fx.config(), "-o", &fx.path("a")]));
    assert_ok(&flowbo(&["optimize", "-c", &fx.config(), "-o", &fx.path("b")]));
    assert_ok(&flowbo(&["optimize", "-c", &fx.config(), "-o", &fx.path("c"), "--seed", "4"]));
    for f in ["run_log.jsonl", "batches.jsonl", "best_so_far.csv", "summary.json", "flow.bin", "embeddings.bin"] {
        assert_eq!(read(&fx.out("a").join(f)), read(&fx.out("b").join(f)), "{f}");
    }
    assert_ne!(read(&fx.out("a").join("run_log.jsonl")), read(&fx.out("c").join("run_log.jsonl")));
    let log = fs::read_to_string(fx.out("a").join("run_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    for key in ["call_index", "tokens", "y", "best_y", "region_id", "tr_length"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert!(log.lines().count() <= 20);
}

#[test]
fn environment_overrides_seed_and_output_dir() {
    let fx = Fixture::new(&SMALL.replace("budget = 12", "budget = 0"));
    let o = Command::new(env!("CARGO_BIN_EXE_flowbo"))
        .args(["optimize", "-c", &fx.config()])
        .env("FLOWBO_SEED", "4")
        .env("FLOWBO_OUTPUT_DIR", fx.path("envout"))
        .output()
        .unwrap();
    assert_ok(&o);
    let eff = fs::read_to_string(fx.out("envout").join("effective-config.toml")).unwrap();
    assert!(eff.contains("seed = 4"));
}

#[test]
fn random_search_baseline_writes_curve() {
    let fx = Fixture::new(SMALL);
    assert_ok(&flowbo(&["optimize", "-c", &fx.config(), "-o", &fx.path("rs"), "--random-search"]));
    let csv = fs::read_to_string(fx.out("rs").join("best_so_far.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20);
}

#[test]
fn eval_outputs_have_documented_shapes() {
    let fx = Fixture::new(SMALL);
    assert_ok(&flowbo(&["optimize", "-c", &fx.config(), "-o", &fx.path("run")]));
    let ck = fx.path("run");
    assert_ok(&flowbo(&["eval", "discrepancy", "-c", &fx.config(), "-o", &fx.path("ev"), "--checkpoint", &ck]));
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.out("ev").join("discrepancy.json")).unwrap()).unwrap();
    assert_eq!(d["value_discrepancy_ratio"], 0.0);
    assert_eq!(d["n_records"], 40);

    assert_ok(&flowbo(&["eval", "distinct", "-c", &fx.config(), "-o", &fx.path("ev"), "--checkpoint", &ck]));
    let csv = fs::read_to_string(fx.out("ev").join("distinct.csv")).unwrap();
    // 3 temperatures x 2 modes x 2 seeds.
    assert_eq!(csv.lines().count(), 1 + 12);
    assert!(csv.starts_with("temperature,mode,seed,distinct_ratio"));

    assert_ok(&flowbo(&["eval", "pmi", "-c", &fx.config(), "-o", &fx.path("ev"), "--checkpoint", &ck]));
    let pmi = fs::read_to_string(fx.out("ev").join("pmi.csv")).unwrap();
    assert_eq!(pmi.lines().count(), 1 + 5);

    let none = flowbo(&["eval", "pmi", "-c", &fx.config(), "-o", &fx.path("ev")]);
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn report_merges_runs() {
    let fx = Fixture::new(SMALL);
    for (name, body) in [("runs/s0", "call_index,best_y\n0,0.5\n1,0.75\n"), ("runs/s1", "call_index,best_y\n0,0.5\n1,0.75\n")] {
        fs::create_dir_all(fx.out(name)).unwrap();
        fs::write(fx.out(name).join("best_so_far.csv"), body).unwrap();
    }
    assert_ok(&flowbo(&["report", &fx.path("runs"), "-o", &fx.path("rep")]));
    let csv = fs::read_to_string(fx.out("rep").join("report.csv")).unwrap();
    assert_eq!(csv, "call_index,mean_best_y,stderr_best_y,n_runs\n0,0.5,0,2\n1,0.75,0,2\n");
    assert_eq!(flowbo(&["report", &fx.path("nothing-here"), "-o", &fx.path("rep")]).status.code(), Some(2));
}
