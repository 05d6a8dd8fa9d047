use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Utterance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn num_target(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn validate(&self) -> Result<()> {
        let targets = self.num_target();
        if targets == 0 || targets == self.trials.len() {
            return Err(Error::invalid(
                "trials",
                "need at least one target and one nontarget trial",
            ));
        }
        Ok(())
    }

    /// `<0|1> <enroll> <test>` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", i + 1));
            if fields.len() != 3 {
                return Err(bad("expected `<label> <enroll> <test>`"));
            }
            let target = match fields[0] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 0 or 1")),
            };
            trials.push(Trial {
                target,
                enroll: fields[1].to_owned(),
                test: fields[2].to_owned(),
            });
        }
        let set = TrialSet { trials };
        set.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        TrialSet::parse(&text, path)
    }
}

/// Samples distinct same-speaker and cross-speaker pairs; targets come first,
/// then nontargets. Never pairs an utterance with itself.
pub fn make_trials(
    utts: &[Utterance],
    num_target: usize,
    num_nontarget: usize,
    seed: u64,
) -> Result<TrialSet> {
    if num_target == 0 || num_nontarget == 0 {
        return Err(Error::invalid(
            "make_trials",
            "need at least one target and one nontarget trial (EER is undefined otherwise)",
        ));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in utts.iter().enumerate() {
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(i);
    }
    let target_pool: usize = by_speaker.values().map(|v| v.len() * (v.len() - 1) / 2).sum();
    let total_pairs = utts.len() * utts.len().saturating_sub(1) / 2;
    let nontarget_pool = total_pairs - target_pool;
    if num_target > target_pool {
        return Err(Error::invalid(
            "make_trials",
            format!("requested {num_target} target trials but only {target_pool} exist"),
        ));
    }
    if num_nontarget > nontarget_pool {
        return Err(Error::invalid(
            "make_trials",
            format!("requested {num_nontarget} nontarget trials but only {nontarget_pool} exist"),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(num_target + num_nontarget);

    // targets: enumerate when the pool is small, otherwise rejection-sample
    let speakers: Vec<&Vec<usize>> = by_speaker.values().filter(|v| v.len() >= 2).collect();
    let targets = if 2 * num_target >= target_pool {
        let mut all: Vec<(usize, usize)> = speakers
            .iter()
            .flat_map(|v| {
                (0..v.len()).flat_map(move |a| (a + 1..v.len()).map(move |b| (v[a], v[b])))
            })
            .collect();
        all.shuffle(&mut rng);
        all.truncate(num_target);
        all
    } else {
        let weights: Vec<usize> = speakers.iter().map(|v| v.len() * (v.len() - 1) / 2).collect();
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(num_target);
        while out.len() < num_target {
            let mut r = rng.random_range(0..target_pool);
            let mut s = 0;
            while r >= weights[s] {
                r -= weights[s];
                s += 1;
            }
            let v = speakers[s];
            let a = rng.random_range(0..v.len());
            let b = rng.random_range(0..v.len());
            if a == b {
                continue;
            }
            let pair = (v[a.min(b)], v[a.max(b)]);
            if seen.insert(pair) {
                out.push(pair);
            }
        }
        out
    };

    let nontargets = if 2 * num_nontarget >= nontarget_pool {
        let mut all = Vec::with_capacity(nontarget_pool);
        for a in 0..utts.len() {
            for b in a + 1..utts.len() {
                if utts[a].speaker_id != utts[b].speaker_id {
                    all.push((a, b));
                }
            }
        }
        all.shuffle(&mut rng);
        all.truncate(num_nontarget);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(num_nontarget);
        while out.len() < num_nontarget {
            let a = rng.random_range(0..utts.len());
            let b = rng.random_range(0..utts.len());
            if utts[a].speaker_id == utts[b].speaker_id {
                continue;
            }
            if seen.insert((a.min(b), a.max(b))) {
                out.push((a, b));
            }
        }
        out
    };

    for (pairs, target) in [(targets, true), (nontargets, false)] {
        for (a, b) in pairs {
            trials.push(Trial {
                target,
                enroll: utts[a].utt_id.clone(),
                test: utts[b].utt_id.clone(),
            });
        }
    }
    Ok(TrialSet { trials })
}
