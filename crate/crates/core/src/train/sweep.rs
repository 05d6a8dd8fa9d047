use std::fmt;
use std::path::Path;

use super::{adapt_grad_est, adapt_vanilla, evaluate, EvalReport, ExperimentConfig, Mode, PaddingConfig, SpeakerModel};
use crate::data::{TrialSet, Utterance};
use crate::error::{Error, Result};

pub const RESULTS_HEADER: [&str; 9] = [
    "mode",
    "n",
    "l",
    "k",
    "score_mode",
    "eer_percent",
    "threshold",
    "num_trials",
    "seed",
];

/// A sweep cell that failed; the remaining cells still run.
#[derive(Debug)]
pub struct CellFailure {
    pub mode: Mode,
    pub n: usize,
    pub k: usize,
    pub error: Error,
}

impl fmt::Display for CellFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cell mode={} n={} k={}: {}", self.mode, self.n, self.k, self.error)
    }
}

/// Adapts and evaluates every `(mode, n, k)` cell, with `l = n * k`, from the
/// same pretrained model and seed.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    model: &SpeakerModel,
    target_train: &[Utterance],
    eval_utts: &[Utterance],
    trials: &TrialSet,
    base: &ExperimentConfig,
    modes: &[Mode],
    n_values: &[usize],
    k_values: &[usize],
    mut on_cell: impl FnMut(&std::result::Result<EvalReport, CellFailure>),
) -> Vec<std::result::Result<EvalReport, CellFailure>> {
    let mut out = Vec::new();
    for &mode in modes {
        for &k in k_values {
            for &n in n_values {
                let result = run_cell(model, target_train, eval_utts, trials, base, mode, n, k)
                    .map_err(|error| CellFailure { mode, n, k, error });
                on_cell(&result);
                out.push(result);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    model: &SpeakerModel,
    target_train: &[Utterance],
    eval_utts: &[Utterance],
    trials: &TrialSet,
    base: &ExperimentConfig,
    mode: Mode,
    n: usize,
    k: usize,
) -> Result<EvalReport> {
    let cfg = ExperimentConfig {
        mode,
        padding: PaddingConfig {
            l: n * k,
            k,
            ..base.padding
        },
        ..base.clone()
    };
    let adapted = match mode {
        Mode::AdaptVanilla => adapt_vanilla(model, target_train, &cfg)?,
        Mode::AdaptGradEst => adapt_grad_est(&model.embedder(), &model.fbank, target_train, &cfg)?,
        other => {
            return Err(Error::config(format!(
                "sweep cells must use an adaptation mode, got {other}"
            )))
        }
    };
    evaluate(
        &model.embedder(),
        &adapted.padding,
        eval_utts,
        trials,
        cfg.score_mode,
        mode,
        cfg.seed,
    )
}

pub fn write_results_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if reports.is_empty() {
        w.write_record(RESULTS_HEADER)?;
    }
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let missing: Vec<&str> = RESULTS_HEADER
        .iter()
        .copied()
        .filter(|h| !headers.iter().any(|x| x == h))
        .collect();
    let unexpected: Vec<&str> = headers
        .iter()
        .map(String::as_str)
        .filter(|h| !RESULTS_HEADER.contains(h))
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::format(
            path,
            format!(
                "results schema mismatch: missing columns [{}], unexpected columns [{}]",
                missing.join(", "),
                unexpected.join(", ")
            ),
        ));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
