//! Source-filter speech stand-in: an impulse train following an f0 contour,
//! shaped by a cascade of formant resonators, then coloured by the domain's
//! spectral tilt and noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Peak amplitude every generated utterance is normalised to.
pub const PEAK_LEVEL: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub speaker_id: String,
    pub f0_hz: f64,
    pub formant_hz: [f64; 3],
    pub formant_bw_hz: [f64; 3],
    pub seed: u64,
}

impl SyntheticSpeaker {
    /// Draws a speaker: log-uniform f0 in [80, 300] Hz and three increasing
    /// formants with typical bandwidths.
    pub fn draw(speaker_id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0_hz = (rng.random_range(80f64.ln()..300f64.ln())).exp();
        let f1 = rng.random_range(300.0..850.0);
        let f2 = rng.random_range(f1 + 450.0..2500.0);
        let f3 = rng.random_range(f2 + 400.0..3600.0);
        let formant_bw_hz = [
            rng.random_range(50.0..110.0),
            rng.random_range(70.0..150.0),
            rng.random_range(100.0..220.0),
        ];
        SyntheticSpeaker {
            speaker_id: speaker_id.into(),
            f0_hz,
            formant_hz: [f1, f2, f3],
            formant_bw_hz,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(80.0..=300.0).contains(&self.f0_hz) {
            return Err(Error::config(format!("speaker f0 {} outside [80, 300] Hz", self.f0_hz)));
        }
        let f = self.formant_hz;
        if !(f[0] > 0.0 && f[0] < f[1] && f[1] < f[2] && f[2] < nyquist) {
            return Err(Error::config(format!(
                "speaker formants {f:?} must be strictly increasing and below {nyquist} Hz"
            )));
        }
        Ok(())
    }
}

/// Shape of the pitch movement inside an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourFamily {
    /// Slow fall across the whole utterance.
    Declination,
    /// Each syllable carries one of four lexical-tone shapes.
    Tonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    pub f0_contour_family: ContourFamily,
    /// Relative pitch excursion of the contour (fraction of the speaker's f0).
    pub f0_range: [f64; 2],
    pub segment_seconds: [f64; 2],
    pub utterance_seconds: [f64; 2],
    pub noise_snr_db: [f64; 2],
    pub spectral_tilt_db_per_octave: f64,
}

impl DomainSpec {
    /// Read-speech-like domain used for pretraining.
    pub fn source() -> Self {
        DomainSpec {
            domain_id: "source".into(),
            f0_contour_family: ContourFamily::Declination,
            f0_range: [0.05, 0.15],
            segment_seconds: [0.12, 0.25],
            utterance_seconds: [0.8, 1.4],
            noise_snr_db: [25.0, 35.0],
            spectral_tilt_db_per_octave: 0.0,
        }
    }

    /// Mismatched domain used for adaptation and evaluation: tonal pitch, noisier
    /// and darker recordings, and shorter utterances.
    pub fn target() -> Self {
        DomainSpec {
            domain_id: "target".into(),
            f0_contour_family: ContourFamily::Tonal,
            f0_range: [0.15, 0.35],
            segment_seconds: [0.08, 0.18],
            utterance_seconds: [0.5, 0.9],
            noise_snr_db: [12.0, 20.0],
            spectral_tilt_db_per_octave: -6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("f0_range", self.f0_range),
            ("segment_seconds", self.segment_seconds),
            ("utterance_seconds", self.utterance_seconds),
            ("noise_snr_db", self.noise_snr_db),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!(
                    "domain `{}`: {name} must be a finite range with lo <= hi, got [{lo}, {hi}]",
                    self.domain_id
                )));
            }
        }
        if !(self.f0_range[0] >= 0.0 && self.f0_range[1] < 0.9) {
            return Err(Error::config("f0_range must lie in [0, 0.9)"));
        }
        if self.segment_seconds[0] <= 0.02 {
            return Err(Error::config("segment_seconds must exceed 0.02"));
        }
        if self.utterance_seconds[0] < 0.05 {
            return Err(Error::config("utterance_seconds must be at least 0.05"));
        }
        if !self.spectral_tilt_db_per_octave.is_finite() {
            return Err(Error::config("spectral tilt must be finite"));
        }
        if self.domain_id.is_empty() || self.domain_id.contains(char::is_whitespace) {
            return Err(Error::config("domain_id must be a non-empty token without spaces"));
        }
        Ok(())
    }
}

/// Vowel inventory shared by all speakers, as multipliers on a speaker's own
/// formant frequencies.
const VOWELS: [[f64; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [0.78, 1.28, 1.06],
    [1.32, 0.86, 0.96],
    [0.70, 0.72, 0.98],
    [1.12, 1.12, 1.08],
    [0.92, 1.45, 1.12],
];

/// Per-utterance seed derived from the corpus seed and position, so any single
/// utterance can be regenerated on its own.
pub fn utterance_seed(corpus_seed: u64, speaker: usize, utt: usize) -> u64 {
    let mut z = corpus_seed
        ^ (speaker as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (utt as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn speaker_seed(corpus_seed: u64, domain_id: &str, speaker: usize) -> u64 {
    let tag = domain_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    utterance_seed(corpus_seed ^ tag, speaker, usize::MAX)
}

/// Second-order resonator with unity gain at DC.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn set(&mut self, freq: f64, bw: f64) {
        let t = 1.0 / SAMPLE_RATE as f64;
        let r = (-PI * bw * t).exp();
        self.c = -r * r;
        self.b = 2.0 * r * (2.0 * PI * freq * t).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Approximate constant spectral tilt (dB per octave): whole stages of a
/// first-order low-pass (corner ~100 Hz) or first difference, with the
/// fractional part blended in. Absolute level is irrelevant because of the
/// later peak normalisation.
fn apply_tilt(x: &mut [f64], db_per_octave: f64) {
    if db_per_octave == 0.0 {
        return;
    }
    let stages = db_per_octave.abs() / 6.0;
    let whole = stages.floor() as usize;
    let frac = stages - whole as f64;
    let beta = (-2.0 * PI * 100.0 / SAMPLE_RATE as f64).exp();
    let stage = |x: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut prev_in = 0.0;
        let mut prev_out = 0.0;
        for &v in x {
            let y = if db_per_octave < 0.0 {
                // one-pole low-pass, normalised to unity at DC
                (1.0 - beta) * v + beta * prev_out
            } else {
                // first difference, normalised to unity at Nyquist
                0.5 * (v - prev_in)
            };
            prev_in = v;
            prev_out = y;
            out.push(y);
        }
        out
    };
    for _ in 0..whole {
        let y = stage(x);
        x.copy_from_slice(&y);
    }
    if frac > 0.0 {
        let y = stage(x);
        for (a, b) in x.iter_mut().zip(y) {
            *a = (1.0 - frac) * *a + frac * b;
        }
    }
}

fn tone_shape(tone: usize, u: f64) -> f64 {
    match tone {
        0 => 1.0,                              // high level
        1 => 2.0 * u - 1.0,                    // rising
        2 => (2.0 * u - 1.0).powi(2) * 2.0 - 1.0, // dipping
        _ => 1.0 - 2.0 * u,                    // falling
    }
}

/// Synthesises one utterance. Pure function of its arguments.
pub fn synthesize(speaker: &SyntheticSpeaker, domain: &DomainSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let [lo, hi] = domain.utterance_seconds;
    let total = (rng.random_range(lo..=hi) * sr) as usize;
    let edge = (rng.random_range(0.03..0.08) * sr) as usize;
    let voiced_len = total.saturating_sub(2 * edge).max(1);

    // syllables: duration, vowel, tone
    let mut segments = Vec::new();
    let mut covered = 0;
    while covered < voiced_len {
        let [s_lo, s_hi] = domain.segment_seconds;
        let len = ((rng.random_range(s_lo..=s_hi) * sr) as usize).min(voiced_len - covered);
        segments.push((covered, len, rng.random_range(0..VOWELS.len()), rng.random_range(0..4)));
        covered += len;
    }

    let f0_base = speaker.f0_hz * (rng.random_range(-0.06f64..0.06)).exp();
    let excursion = rng.random_range(domain.f0_range[0]..=domain.f0_range[1]);
    let mut voiced = vec![0.0; voiced_len];
    let mut resonators = [Resonator::default(); 3];
    let mut phase = rng.random_range(0.0..1.0);
    let jitter = Normal::new(0.0, 0.01).expect("valid std");
    let ramp = (0.012 * sr) as usize;
    for &(start, len, vowel, tone) in &segments {
        for (j, r) in resonators.iter_mut().enumerate() {
            let f = (speaker.formant_hz[j] * VOWELS[vowel][j]).min(0.45 * sr);
            r.set(f, speaker.formant_bw_hz[j]);
        }
        let loudness = rng.random_range(0.6..1.0);
        for i in 0..len {
            let t = start + i;
            let u = i as f64 / len.max(1) as f64;
            let shape = match domain.f0_contour_family {
                ContourFamily::Declination => 1.0 - 2.0 * (t as f64 / voiced_len as f64),
                ContourFamily::Tonal => tone_shape(tone, u),
            };
            let f0 = f0_base * (1.0 + excursion * shape) * (1.0 + jitter.sample(&mut rng));
            phase += f0 / sr;
            let mut excitation = 0.0;
            if phase >= 1.0 {
                phase -= phase.floor();
                excitation = 1.0;
            }
            let env = {
                let a = (i.min(len - 1 - i) as f64 / ramp as f64).min(1.0);
                0.5 - 0.5 * (PI * a).cos()
            };
            let mut y = excitation * loudness * env;
            for r in resonators.iter_mut() {
                y = r.tick(y);
            }
            voiced[t] = y;
        }
    }

    let mut x = vec![0.0; total.max(voiced_len)];
    x[edge..edge + voiced_len].copy_from_slice(&voiced);
    apply_tilt(&mut x, domain.spectral_tilt_db_per_octave);

    let power = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let snr = rng.random_range(domain.noise_snr_db[0]..=domain.noise_snr_db[1]);
    let noise_std = (power / 10f64.powf(snr / 10.0)).sqrt().max(1e-9);
    let noise = Normal::new(0.0, noise_std).expect("finite noise level");
    for v in x.iter_mut() {
        *v += noise.sample(&mut rng);
    }

    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK_LEVEL / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

/// Draws `num_speakers` speakers for `domain` and `utts_per_speaker[0]..=[1]`
/// utterances for each.
pub fn generate_corpus(
    num_speakers: usize,
    utts_per_speaker: [usize; 2],
    domain: &DomainSpec,
    seed: u64,
) -> Result<Vec<Utterance>> {
    if num_speakers < 2 {
        return Err(Error::config("a corpus needs at least 2 speakers"));
    }
    let [u_lo, u_hi] = utts_per_speaker;
    if u_lo == 0 || u_lo > u_hi {
        return Err(Error::config(format!(
            "utterances per speaker must be a range with 1 <= lo <= hi, got [{u_lo}, {u_hi}]"
        )));
    }
    domain.validate()?;
    let speakers = draw_speakers(num_speakers, domain, seed);
    let mut count_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C0DE);
    let mut corpus = Vec::new();
    for (s, speaker) in speakers.iter().enumerate() {
        let n = count_rng.random_range(u_lo..=u_hi);
        for u in 0..n {
            let useed = utterance_seed(speaker.seed, s, u);
            corpus.push(Utterance {
                utt_id: format!("{}-u{u:03}", speaker.speaker_id),
                speaker_id: speaker.speaker_id.clone(),
                domain_id: domain.domain_id.clone(),
                samples: synthesize(speaker, domain, useed),
                source: format!("synth:{}:{}", speaker.seed, useed),
            });
        }
    }
    Ok(corpus)
}

/// Speakers of a corpus; ids are `<domain>-s<index>`.
pub fn draw_speakers(num_speakers: usize, domain: &DomainSpec, seed: u64) -> Vec<SyntheticSpeaker> {
    (0..num_speakers)
        .map(|s| {
            SyntheticSpeaker::draw(
                format!("{}-s{s:03}", domain.domain_id),
                speaker_seed(seed, &domain.domain_id, s),
            )
        })
        .collect()
}
