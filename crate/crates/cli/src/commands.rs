use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use reprosv_core::data::{Corpus, TrialSet, Utterance, SPLITS};
use reprosv_core::models::Checkpoint;
use reprosv_core::reprogram::PaddingParams;
use reprosv_core::train::{
    adapt_grad_est, adapt_vanilla, evaluate, pretrain, run_sweep, write_results_csv, EpochStats,
    EvalReport, ExperimentConfig, Mode, SpeakerModel,
};

use crate::config::{require, EvalDomain, RunConfig};
use crate::manifest::RunManifest;
use crate::report;
use crate::UsageError;

/// A fully resolved command: everything a run depends on, so it can be
/// replayed from its manifest.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: String,
    pub mode: Option<Mode>,
    pub config: RunConfig,
    pub report_inputs: Vec<PathBuf>,
}

pub enum Outcome {
    Done,
    /// Some sweep cells failed; the others were written.
    Partial(usize),
}

impl Invocation {
    pub fn from_manifest(m: RunManifest) -> Self {
        Invocation {
            command: m.command,
            mode: m.mode,
            config: m.config,
            report_inputs: m.report_inputs,
        }
    }

    pub fn run(&self, out: &Path, force: bool) -> Result<Outcome> {
        prepare_out(out, force)?;
        let out = fs::canonicalize(out)?;
        let mut manifest = RunManifest::new(&self.command, self.mode, self.config.clone());
        manifest.report_inputs = self.report_inputs.clone();
        let outcome = match self.command.as_str() {
            "gen-data" => gen_data(&self.config, &out, &mut manifest)?,
            "pretrain" => cmd_pretrain(&self.config, &out, &mut manifest)?,
            "adapt" => cmd_adapt(&self.config, self.mode, &out, &mut manifest)?,
            "eval" => cmd_eval(&self.config, &out, &mut manifest)?,
            "sweep" => cmd_sweep(&self.config, self.mode, &out, &mut manifest)?,
            "report" => report::run(&self.report_inputs, &out, &mut manifest)?,
            other => return Err(UsageError(format!("unknown command `{other}`")).into()),
        };
        let path = manifest.save(&out)?;
        println!("manifest: {}", path.display());
        Ok(outcome)
    }
}

/// Refuses to reuse a non-empty run directory unless `force` is set.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("{} is not a readable directory", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(UsageError(format!(
                "output directory {} already exists and is not empty; pass --force to overwrite",
                out.display()
            ))
            .into());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn experiment(cfg: &RunConfig, mode: Mode) -> Result<ExperimentConfig> {
    let exp = ExperimentConfig {
        mode,
        ..cfg.experiment.clone()
    };
    exp.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(exp)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = require(&cfg.data.corpus, "data.corpus")?;
    if !dir.is_dir() {
        return Err(UsageError(format!("corpus directory {} does not exist", dir.display())).into());
    }
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_model(cfg: &RunConfig) -> Result<SpeakerModel> {
    let path = require(&cfg.model.checkpoint, "model.checkpoint")?;
    if !path.is_file() {
        return Err(UsageError(format!("checkpoint {} does not exist", path.display())).into());
    }
    SpeakerModel::load(path).map_err(|e| UsageError(format!("loading {}: {e}", path.display())).into())
}

fn eval_split<'a>(cfg: &RunConfig, corpus: &'a Corpus) -> (&'a [Utterance], &'a TrialSet) {
    match cfg.data.eval_domain {
        EvalDomain::Source => (&corpus.source_eval, &corpus.source_trials),
        EvalDomain::Target => (&corpus.target_eval, &corpus.target_trials),
    }
}

fn write_log(path: &Path, log: &[EpochStats]) -> Result<()> {
    let mut text = String::new();
    for e in log {
        let _ = writeln!(text, "{e}");
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_results(out: &Path, manifest: &mut RunManifest, reports: &[EvalReport]) -> Result<()> {
    let path = out.join("results.csv");
    write_results_csv(&path, reports)?;
    for r in reports {
        println!(
            "{} n={} l={} k={} EER {:.2}% ({} trials)",
            r.mode, r.n, r.l, r.k, r.eer_percent, r.num_trials
        );
    }
    manifest.outputs.insert("results".into(), path);
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Outcome> {
    let corpus = cfg
        .corpus
        .generate(cfg.experiment.seed)
        .map_err(|e| UsageError(e.to_string()))?;
    corpus.save(out, &cfg.corpus.domains(), cfg.data.write_wavs)?;
    for name in SPLITS {
        manifest.outputs.insert(name.into(), out.join(format!("{name}.list")));
    }
    manifest.outputs.insert("source_trials".into(), out.join("source_trials.txt"));
    manifest.outputs.insert("target_trials".into(), out.join("target_trials.txt"));
    manifest.outputs.insert("domains".into(), out.join("domains.json"));
    println!(
        "corpus: {} source / {} target training utterances, {} + {} trials",
        corpus.source_train.len(),
        corpus.target_train.len(),
        corpus.source_trials.len(),
        corpus.target_trials.len()
    );
    Ok(Outcome::Done)
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Outcome> {
    let exp = experiment(cfg, Mode::Pretrain)?;
    let corpus = load_corpus(cfg)?;
    let (model, log) = pretrain(&corpus.source_train, &exp)?;
    let ckpt = out.join("model.ckpt");
    model.save(&ckpt)?;
    write_log(&out.join("train.log"), &log)?;
    if let Some(last) = log.last() {
        println!("{last}");
    }
    manifest.checkpoints.insert("model".into(), ckpt);
    manifest.outputs.insert("log".into(), out.join("train.log"));
    Ok(Outcome::Done)
}

fn adapt_mode(flag: Option<Mode>, cfg: &RunConfig) -> Result<Mode> {
    match flag.unwrap_or(cfg.experiment.mode) {
        m @ (Mode::AdaptVanilla | Mode::AdaptGradEst) => Ok(m),
        other => Err(UsageError(format!(
            "adapt needs --mode vanilla|grad_est (config mode is `{other}`)"
        ))
        .into()),
    }
}

fn cmd_adapt(cfg: &RunConfig, mode: Option<Mode>, out: &Path, manifest: &mut RunManifest) -> Result<Outcome> {
    let mode = adapt_mode(mode, cfg)?;
    manifest.mode = Some(mode);
    let exp = experiment(cfg, mode)?;
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg)?;
    let adapted = match mode {
        Mode::AdaptVanilla => adapt_vanilla(&model, &corpus.target_train, &exp)?,
        _ => adapt_grad_est(&model.embedder(), &model.fbank, &corpus.target_train, &exp)?,
    };
    let padding = out.join("padding.ckpt");
    adapted.padding.save(&padding)?;
    manifest.checkpoints.insert("padding".into(), padding);
    let head = out.join("head.ckpt");
    adapted.head.to_checkpoint().save(&head)?;
    manifest.checkpoints.insert("head".into(), head);
    if let Some(est) = &adapted.estimator {
        let path = out.join("estimator.ckpt");
        est.to_checkpoint().save(&path)?;
        manifest.checkpoints.insert("estimator".into(), path);
    }
    write_log(&out.join("adapt.log"), &adapted.log)?;
    manifest.outputs.insert("log".into(), out.join("adapt.log"));

    let (utts, trials) = eval_split(cfg, &corpus);
    let report = evaluate(
        &model.embedder(),
        &adapted.padding,
        utts,
        trials,
        exp.score_mode,
        mode,
        exp.seed,
    )?;
    write_results(out, manifest, &[report])?;
    Ok(Outcome::Done)
}

fn load_padding(path: &Path) -> Result<PaddingParams> {
    if !path.is_file() {
        return Err(UsageError(format!("padding {} does not exist", path.display())).into());
    }
    // a head or estimator checkpoint passed by mistake is rejected by kind
    let ck = Checkpoint::load(path)?;
    PaddingParams::from_checkpoint(&ck).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Outcome> {
    let exp = experiment(cfg, Mode::Eval)?;
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg)?;
    let padding = match &cfg.model.padding {
        Some(p) => load_padding(p)?,
        None => PaddingParams::from_values(Vec::new(), 1, 0.0)?,
    };
    let (utts, trials) = eval_split(cfg, &corpus);
    let report = evaluate(
        &model.embedder(),
        &padding,
        utts,
        trials,
        exp.score_mode,
        Mode::Eval,
        exp.seed,
    )?;
    write_results(out, manifest, &[report])?;
    Ok(Outcome::Done)
}

fn cmd_sweep(cfg: &RunConfig, mode: Option<Mode>, out: &Path, manifest: &mut RunManifest) -> Result<Outcome> {
    let modes = match mode {
        Some(m) => vec![adapt_mode(Some(m), cfg)?],
        None => cfg.sweep.modes.clone(),
    };
    if modes.is_empty() || cfg.sweep.n_values.is_empty() || cfg.sweep.k_values.is_empty() {
        return Err(UsageError("sweep needs non-empty modes, n_values and k_values".into()).into());
    }
    for &m in &modes {
        adapt_mode(Some(m), cfg)?;
    }
    let exp = experiment(cfg, Mode::Sweep)?;
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg)?;
    let (utts, trials) = eval_split(cfg, &corpus);

    let mut cells_log = String::new();
    let results = run_sweep(
        &model,
        &corpus.target_train,
        utts,
        trials,
        &exp,
        &modes,
        &cfg.sweep.n_values,
        &cfg.sweep.k_values,
        |cell| {
            let line = match cell {
                Ok(r) => format!("ok mode={} n={} k={} eer={:.4}", r.mode, r.n, r.k, r.eer_percent),
                Err(f) => format!("failed {f}"),
            };
            eprintln!("{line}");
            cells_log.push_str(&line);
            cells_log.push('\n');
        },
    );
    fs::write(out.join("cells.log"), cells_log)?;
    manifest.outputs.insert("cells".into(), out.join("cells.log"));

    let total = results.len();
    let reports: Vec<EvalReport> = results.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    let failed = total - reports.len();
    write_results(out, manifest, &reports)?;
    if failed == total {
        anyhow::bail!("all {total} sweep cells failed; see {}", out.join("cells.log").display());
    }
    Ok(if failed > 0 {
        Outcome::Partial(failed)
    } else {
        Outcome::Done
    })
}
