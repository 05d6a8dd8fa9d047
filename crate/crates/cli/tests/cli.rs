use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reprosv_core::data::{Corpus, TrialSet};
use reprosv_core::models::{BlackBoxEmbedder, Checkpoint};
use reprosv_core::reprogram::cosine;
use reprosv_core::train::{compute_eer, read_results_csv, SpeakerModel};

const CONFIG: &str = r#"
seed = 3
epochs = 2
lr_drop_epochs = [1]
crop_seconds = 0.5
batch_size = 8
lr = 0.01

[padding]
l = 800
k = 1

[data]
corpus = "corpus"

[corpus]
source_speakers = 4
target_speakers = 3
eval_speakers = 4
utterances_per_speaker = [3, 4]
eval_utterances_per_speaker = [4, 4]
target_trials = 20
nontarget_trials = 30

[model]
checkpoint = "pre/model.ckpt"

[sweep]
n_values = [0, 3200, 6400]
k_values = [1, 2]
modes = ["adapt_vanilla"]
"#;

fn reprosv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reprosv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[track_caller]
fn ok(dir: &Path, args: &[&str]) {
    let out = reprosv(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
}

/// A workspace with the config, a generated corpus and a pretrained model.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(dir.path(), &["gen-data", "--config", "run.toml", "--out", "corpus"]);
    ok(dir.path(), &["pretrain", "--config", "run.toml", "--out", "pre"]);
    dir
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_deterministic_and_trials_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(dir.path(), &["gen-data", "--config", "run.toml", "--out", "a"]);
    ok(dir.path(), &["gen-data", "--config", "run.toml", "--out", "b"]);
    for f in ["source_train.list", "target_eval.list", "target_trials.txt", "domains.json"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
    let trials = TrialSet::load(&dir.path().join("a/target_trials.txt")).unwrap();
    assert_eq!(trials.len(), 50);
    assert_eq!(trials.num_target(), 20);

    // a different seed gives a different corpus
    ok(dir.path(), &["gen-data", "--config", "run.toml", "--out", "c", "--seed", "4"]);
    assert_ne!(read(dir.path().join("a/target_trials.txt")), read(dir.path().join("c/target_trials.txt")));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("noseed.toml"), "epochs = 2\n").unwrap();
    let out = reprosv(dir.path(), &["gen-data", "--config", "noseed.toml", "--out", "x"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("`seed`"), "{}", stderr(&out));

    fs::write(dir.path().join("nocorpus.toml"), "seed = 1\n").unwrap();
    let out = reprosv(dir.path(), &["pretrain", "--config", "nocorpus.toml", "--out", "y"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("`data.corpus`"), "{}", stderr(&out));

    fs::write(dir.path().join("bad.toml"), "seed = 1\nlr_drop_epochs = [30]\n").unwrap();
    let out = reprosv(dir.path(), &["gen-data", "--config", "bad.toml", "--out", "z"]);
    assert_eq!(code(&out), 0, "gen-data does not train: {}", stderr(&out));
    let out = reprosv(dir.path(), &["eval", "--config", "bad.toml", "--out", "w"]);
    assert_eq!(code(&out), 1);

    let out = reprosv(dir.path(), &["adapt", "--config", "bad.toml", "--out", "v", "--mode", "sideways"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn run_directories_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(dir.path(), &["gen-data", "--config", "run.toml", "--out", "corpus"]);
    let out = reprosv(dir.path(), &["gen-data", "--config", "run.toml", "--out", "corpus"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--force"));
    ok(dir.path(), &["gen-data", "--config", "run.toml", "--out", "corpus", "--force"]);
}

#[test]
fn pipeline_eval_sweep_rerun_and_report() {
    let ws = workspace();
    let dir = ws.path();

    // eval without padding is the plain cosine baseline
    ok(dir, &["eval", "--config", "run.toml", "--out", "base"]);
    let rows = read_results_csv(&dir.join("base/results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].l, rows[0].n), (0, 0));
    let model = SpeakerModel::load(&dir.join("pre/model.ckpt")).unwrap();
    let corpus = Corpus::load(&dir.join("corpus")).unwrap();
    let emb = model.embedder();
    let find = |id: &str| corpus.target_eval.iter().find(|u| u.utt_id == id).unwrap();
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for t in &corpus.target_trials.trials {
        let a = emb.embed(&find(&t.enroll).samples).unwrap();
        let b = emb.embed(&find(&t.test).samples).unwrap();
        let s = cosine(&a, &b).unwrap();
        if t.target { tar.push(s) } else { non.push(s) }
    }
    let (eer, _) = compute_eer(&tar, &non).unwrap();
    assert_eq!(rows[0].eer_percent, eer);

    // adapt then evaluate the learned padding through `eval`
    ok(dir, &["adapt", "--config", "run.toml", "--out", "ad", "--mode", "vanilla"]);
    for f in ["padding.ckpt", "head.ckpt", "adapt.log", "results.csv", "run.json"] {
        assert!(dir.join("ad").join(f).is_file(), "{f}");
    }
    assert_eq!(read(dir.join("ad/adapt.log")).lines().count(), 2);
    ok(dir, &["eval", "--config", "run.toml", "--out", "ev", "--padding", "ad/padding.ckpt"]);
    let adapted = read_results_csv(&dir.join("ad/results.csv")).unwrap();
    let evaluated = read_results_csv(&dir.join("ev/results.csv")).unwrap();
    assert_eq!(adapted[0].eer_percent, evaluated[0].eer_percent);

    // 3 x 2 grid, and an identical CSV when replayed from the manifest
    ok(dir, &["sweep", "--config", "run.toml", "--out", "sw", "--mode", "vanilla"]);
    let csv = read(dir.join("sw/results.csv"));
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(csv.lines().next().unwrap(), "mode,n,l,k,score_mode,eer_percent,threshold,num_trials,seed");
    ok(dir, &["rerun", "sw/run.json", "--out", "sw2"]);
    assert_eq!(read(dir.join("sw2/results.csv")), csv);
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.join("sw/run.json"))).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["command"], "sweep");
    assert!(manifest["config"]["model"]["checkpoint"].as_str().unwrap().ends_with("model.ckpt"));

    ok(dir, &["report", "sw/results.csv", "base/results.csv", "--out", "rep"]);
    let md = read(dir.join("rep/report.md"));
    assert_eq!(md.lines().count(), 2 + 7);
    let plot = read(dir.join("rep/plot_adapt_vanilla.dat"));
    assert_eq!(plot.lines().next().unwrap(), "n eer_percent");
    assert_eq!(plot.lines().count(), 7);
    assert!(dir.join("rep/plot_eval.dat").is_file());
}

#[test]
fn partial_sweep_failure_has_its_own_exit_code() {
    let ws = workspace();
    let dir = ws.path();
    let cfg = CONFIG.replace("k_values = [1, 2]", "k_values = [1, 0]").replace("[0, 3200, 6400]", "[400]");
    fs::write(dir.join("partial.toml"), cfg).unwrap();
    let out = reprosv(dir, &["sweep", "--config", "partial.toml", "--out", "sw"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert_eq!(read(dir.join("sw/results.csv")).lines().count(), 2);
    assert!(read(dir.join("sw/cells.log")).contains("failed"));
}

#[test]
fn report_rejects_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "mode,n,eer,extra\nadapt_vanilla,0,1.0,x\n").unwrap();
    let out = reprosv(dir.path(), &["report", "bad.csv", "--out", "rep"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    for col in ["eer_percent", "threshold", "eer", "extra"] {
        assert!(err.contains(col), "{col} not listed: {err}");
    }
}

#[test]
fn version_mismatch_is_refused() {
    let ws = workspace();
    let dir = ws.path();
    let path = dir.join("pre/model.ckpt");
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.meta["version"] = serde_json::json!("0.0.0-other");
    ck.save(&dir.join("old.ckpt")).unwrap();
    let cfg = CONFIG.replace("pre/model.ckpt", "old.ckpt");
    fs::write(dir.join("old.toml"), cfg).unwrap();
    let out = reprosv(dir, &["eval", "--config", "old.toml", "--out", "ev"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("version"), "{}", stderr(&out));

    ok(dir, &["eval", "--config", "run.toml", "--out", "ev2"]);
    let m = read(dir.join("ev2/run.json")).replace(env!("CARGO_PKG_VERSION"), "0.0.0-other");
    fs::write(dir.join("old.json"), m).unwrap();
    let out = reprosv(dir, &["rerun", "old.json", "--out", "ev3"]);
    assert_eq!(code(&out), 1);
}
