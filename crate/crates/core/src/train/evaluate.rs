use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{compute_eer, Mode};
use crate::data::{TrialSet, Utterance};
use crate::error::{Error, Result};
use crate::models::BlackBoxEmbedder;
use crate::reprogram::{expand_and_pad_infer, score_matrix, trial_score, PaddingParams, ScoreMode};

/// One evaluated configuration; field order is the results CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub score_mode: ScoreMode,
    pub eer_percent: f64,
    pub threshold: f64,
    pub num_trials: usize,
    pub seed: u64,
}

/// Scores every trial: each referenced utterance is expanded into `k`
/// padded full-length copies and embedded, and each trial's `k x k` cosine
/// matrix is reduced with `score_mode`. Returns (target, nontarget) scores.
pub fn trial_scores(
    embedder: &dyn BlackBoxEmbedder,
    padding: &PaddingParams,
    utts: &[Utterance],
    trials: &TrialSet,
    score_mode: ScoreMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    trials.validate()?;
    let index: HashMap<&str, usize> =
        utts.iter().enumerate().map(|(i, u)| (u.utt_id.as_str(), i)).collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownUtterance(id.to_owned()))
    };
    // embed each referenced utterance once, in first-reference order
    let mut embeddings: HashMap<usize, Vec<Vec<f64>>> = HashMap::new();
    for t in &trials.trials {
        for id in [&t.enroll, &t.test] {
            let i = lookup(id)?;
            if embeddings.contains_key(&i) {
                continue;
            }
            let copies = expand_and_pad_infer(&utts[i].samples, padding)
                .iter()
                .map(|c| embedder.embed(c))
                .collect::<Result<Vec<_>>>()?;
            embeddings.insert(i, copies);
        }
    }
    let mut tar = Vec::new();
    let mut non = Vec::new();
    for t in &trials.trials {
        let e = &embeddings[&lookup(&t.enroll)?];
        let s = &embeddings[&lookup(&t.test)?];
        let score = trial_score(&score_matrix(e, s)?, score_mode)?;
        if t.target {
            tar.push(score);
        } else {
            non.push(score);
        }
    }
    Ok((tar, non))
}

/// EER of a padded model on a trial list. `mode` and `seed` only label the report.
pub fn evaluate(
    embedder: &dyn BlackBoxEmbedder,
    padding: &PaddingParams,
    utts: &[Utterance],
    trials: &TrialSet,
    score_mode: ScoreMode,
    mode: Mode,
    seed: u64,
) -> Result<EvalReport> {
    let (tar, non) = trial_scores(embedder, padding, utts, trials, score_mode)?;
    let (eer_percent, threshold) = compute_eer(&tar, &non)?;
    Ok(EvalReport {
        mode,
        n: padding.segment_len(),
        l: padding.total_len(),
        k: padding.num_segments(),
        score_mode,
        eer_percent,
        threshold,
        num_trials: trials.len(),
        seed,
    })
}
