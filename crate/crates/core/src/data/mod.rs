//! Corpora: synthetic cross-domain speech, WAV ingestion, manifests and trial lists.

mod corpus;
mod synth;
mod trials;
mod wav;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use corpus::{Corpus, CorpusConfig, SPLITS};
pub use synth::{
    draw_speakers, generate_corpus, synthesize, utterance_seed, ContourFamily, DomainSpec,
    SyntheticSpeaker, PEAK_LEVEL, SAMPLE_RATE,
};
pub use trials::{make_trials, Trial, TrialSet};
pub use wav::{load_wav, write_wav};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub domain_id: String,
    pub samples: Vec<f64>,
    /// Where the samples came from: a WAV path or `synth:<speaker_seed>:<utt_seed>`.
    pub source: String,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub domain_id: String,
    pub location: String,
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{} {} {} {}", e.utt_id, e.speaker_id, e.domain_id, e.location);
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::format(
                path,
                format!("line {}: expected `<utt_id> <speaker_id> <domain_id> <location>`", i + 1),
            ));
        }
        out.push(ManifestEntry {
            utt_id: f[0].into(),
            speaker_id: f[1].into(),
            domain_id: f[2].into(),
            location: f[3].into(),
        });
    }
    Ok(out)
}

/// Loads every manifest entry. Relative WAV paths resolve against `base`;
/// `synth:` entries are regenerated with the matching domain from `domains`.
pub fn load_manifest(path: &Path, domains: &[DomainSpec]) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, path)?
        .into_iter()
        .map(|e| load_entry(e, &base, domains))
        .collect()
}

fn load_entry(e: ManifestEntry, base: &Path, domains: &[DomainSpec]) -> Result<Utterance> {
    let samples = if let Some(spec) = e.location.strip_prefix("synth:") {
        let (spk, utt) = spec
            .split_once(':')
            .and_then(|(a, b)| Some((a.parse::<u64>().ok()?, b.parse::<u64>().ok()?)))
            .ok_or_else(|| Error::invalid("manifest", format!("bad synth spec `{}`", e.location)))?;
        let domain = domains.iter().find(|d| d.domain_id == e.domain_id).ok_or_else(|| {
            Error::invalid("manifest", format!("no domain spec for `{}`", e.domain_id))
        })?;
        synthesize(&SyntheticSpeaker::draw(&e.speaker_id, spk), domain, utt)
    } else {
        let p = PathBuf::from(&e.location);
        load_wav(&if p.is_absolute() { p } else { base.join(p) })?
    };
    Ok(Utterance {
        utt_id: e.utt_id,
        speaker_id: e.speaker_id,
        domain_id: e.domain_id,
        samples,
        source: e.location,
    })
}

impl Utterance {
    pub fn manifest_entry(&self) -> ManifestEntry {
        ManifestEntry {
            utt_id: self.utt_id.clone(),
            speaker_id: self.speaker_id.clone(),
            domain_id: self.domain_id.clone(),
            location: self.source.clone(),
        }
    }
}

/// Distinct speaker ids in first-appearance order.
pub fn speaker_ids(utts: &[Utterance]) -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for u in utts {
        if !ids.contains(&u.speaker_id) {
            ids.push(u.speaker_id.clone());
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_manifest_regenerates_corpus() {
        let d = DomainSpec::target();
        let corpus = generate_corpus(3, [2, 3], &d, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        let entries: Vec<_> = corpus.iter().map(Utterance::manifest_entry).collect();
        std::fs::write(&p, manifest_text(&entries)).unwrap();
        let back = load_manifest(&p, &[DomainSpec::source(), d]).unwrap();
        assert_eq!(back, corpus);
        assert!(load_manifest(&p, &[DomainSpec::source()]).is_err());
    }

    #[test]
    fn wav_manifest_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("a.wav"), &[0.5, -0.25]).unwrap();
        let p = dir.path().join("m.txt");
        std::fs::write(&p, "a spk dom a.wav\n").unwrap();
        let u = load_manifest(&p, &[]).unwrap();
        assert_eq!(u[0].samples, vec![0.5, -0.25]);
        std::fs::write(&p, "a spk dom\n").unwrap();
        assert!(load_manifest(&p, &[]).is_err());
    }
}
