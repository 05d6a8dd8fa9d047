//! The four-split cross-domain corpus used by every experiment: labelled
//! source and target training sets plus disjoint-speaker evaluation sets with
//! their trial lists.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    generate_corpus, load_manifest, make_trials, manifest_text, write_wav, DomainSpec, TrialSet,
    Utterance,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub source_speakers: usize,
    pub target_speakers: usize,
    pub eval_speakers: usize,
    pub utterances_per_speaker: [usize; 2],
    pub eval_utterances_per_speaker: [usize; 2],
    pub target_trials: usize,
    pub nontarget_trials: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            source_speakers: 40,
            target_speakers: 20,
            eval_speakers: 20,
            utterances_per_speaker: [20, 30],
            eval_utterances_per_speaker: [12, 12],
            target_trials: 1000,
            nontarget_trials: 2000,
            source: DomainSpec::source(),
            target: DomainSpec::target(),
        }
    }
}

pub const SPLITS: [&str; 4] = ["source_train", "source_eval", "target_train", "target_eval"];

#[derive(Debug, Clone)]
pub struct Corpus {
    pub source_train: Vec<Utterance>,
    pub source_eval: Vec<Utterance>,
    pub target_train: Vec<Utterance>,
    pub target_eval: Vec<Utterance>,
    pub source_trials: TrialSet,
    pub target_trials: TrialSet,
}

/// Evaluation speakers are drawn from a different seed, so their ids get a
/// prefix to keep them distinct from the training speakers of the same domain.
fn eval_split(cfg: &CorpusConfig, domain: &DomainSpec, seed: u64) -> Result<Vec<Utterance>> {
    let mut utts = generate_corpus(
        cfg.eval_speakers,
        cfg.eval_utterances_per_speaker,
        domain,
        seed.wrapping_add(1000),
    )?;
    for u in &mut utts {
        u.utt_id = format!("eval-{}", u.utt_id);
        u.speaker_id = format!("eval-{}", u.speaker_id);
    }
    Ok(utts)
}

impl CorpusConfig {
    pub fn generate(&self, seed: u64) -> Result<Corpus> {
        let source_eval = eval_split(self, &self.source, seed)?;
        let target_eval = eval_split(self, &self.target, seed)?;
        let source_trials = make_trials(&source_eval, self.target_trials, self.nontarget_trials, seed)?;
        let target_trials = make_trials(
            &target_eval,
            self.target_trials,
            self.nontarget_trials,
            seed.wrapping_add(1),
        )?;
        Ok(Corpus {
            source_train: generate_corpus(
                self.source_speakers,
                self.utterances_per_speaker,
                &self.source,
                seed,
            )?,
            target_train: generate_corpus(
                self.target_speakers,
                self.utterances_per_speaker,
                &self.target,
                seed,
            )?,
            source_eval,
            target_eval,
            source_trials,
            target_trials,
        })
    }

    pub fn domains(&self) -> [DomainSpec; 2] {
        [self.source.clone(), self.target.clone()]
    }
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        Some(match name {
            "source_train" => &self.source_train,
            "source_eval" => &self.source_eval,
            "target_train" => &self.target_train,
            "target_eval" => &self.target_eval,
            _ => return None,
        })
    }

    /// Writes `<split>.list` manifests, `{source,target}_trials.txt` and
    /// `domains.json` into `dir`. With `write_wavs`, every utterance is also
    /// written under `dir/wav/` and the manifests point there; otherwise the
    /// manifests hold regeneration specs.
    pub fn save(&self, dir: &Path, domains: &[DomainSpec; 2], write_wavs: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        if write_wavs {
            fs::create_dir_all(dir.join("wav"))?;
        }
        for name in SPLITS {
            let utts = self.split(name).expect("known split");
            let mut entries = Vec::with_capacity(utts.len());
            for u in utts {
                let mut e = u.manifest_entry();
                if write_wavs {
                    let rel = format!("wav/{}.wav", u.utt_id);
                    write_wav(&dir.join(&rel), &u.samples)?;
                    e.location = rel;
                }
                entries.push(e);
            }
            fs::write(dir.join(format!("{name}.list")), manifest_text(&entries))?;
        }
        self.source_trials.save(&dir.join("source_trials.txt"))?;
        self.target_trials.save(&dir.join("target_trials.txt"))?;
        fs::write(dir.join("domains.json"), serde_json::to_string_pretty(domains)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let domains_path = dir.join("domains.json");
        let domains: Vec<DomainSpec> = serde_json::from_str(&fs::read_to_string(&domains_path)?)
            .map_err(|e| Error::format(&domains_path, e.to_string()))?;
        let load = |name: &str| load_manifest(&dir.join(format!("{name}.list")), &domains);
        Ok(Corpus {
            source_train: load("source_train")?,
            source_eval: load("source_eval")?,
            target_train: load("target_train")?,
            target_eval: load("target_eval")?,
            source_trials: TrialSet::load(&dir.join("source_trials.txt"))?,
            target_trials: TrialSet::load(&dir.join("target_trials.txt"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            source_speakers: 3,
            target_speakers: 2,
            eval_speakers: 3,
            utterances_per_speaker: [2, 2],
            eval_utterances_per_speaker: [3, 3],
            target_trials: 4,
            nontarget_trials: 4,
            ..Default::default()
        }
    }

    #[test]
    fn eval_speakers_are_distinct_from_training_speakers() {
        let c = tiny().generate(5).unwrap();
        assert!(c.target_eval.iter().all(|u| u.speaker_id.starts_with("eval-target-")));
        assert!(!c.target_train.iter().any(|u| u.speaker_id.starts_with("eval-")));
        assert_eq!(c.target_trials.len(), 8);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = tiny();
        let c = cfg.generate(9).unwrap();
        for wavs in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            c.save(dir.path(), &cfg.domains(), wavs).unwrap();
            let back = Corpus::load(dir.path()).unwrap();
            assert_eq!(back.target_trials, c.target_trials);
            for name in SPLITS {
                let (a, b) = (c.split(name).unwrap(), back.split(name).unwrap());
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.utt_id, y.utt_id);
                    let tol = if wavs { 1.0 / 32768.0 } else { 0.0 };
                    let worst = x
                        .samples
                        .iter()
                        .zip(&y.samples)
                        .map(|(p, q)| (p - q).abs())
                        .fold(0.0, f64::max);
                    assert!(worst <= tol, "{name} {}: {worst}", x.utt_id);
                }
            }
        }
    }
}
