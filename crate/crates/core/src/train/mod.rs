//! Pretraining, the two adaptation loops, EER evaluation and the padding sweep.

mod adapt;
mod config;
mod eer;
mod evaluate;
mod model;
mod pretrain;
mod sweep;

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use adapt::{adapt_grad_est, adapt_vanilla, Adaptation};
pub use config::{ExperimentConfig, Mode, PaddingConfig};
pub use eer::compute_eer;
pub use evaluate::{evaluate, trial_scores, EvalReport};
pub use model::SpeakerModel;
pub use pretrain::pretrain;
pub use sweep::{read_results_csv, run_sweep, write_results_csv, CellFailure, RESULTS_HEADER};

use crate::autograd::{Tape, Tensor, Var};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::features::Fbank;

/// Mean training loss and learning rate of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Mean estimator distillation loss (gradient-estimated adaptation only).
    pub mean_distill_loss: Option<f64>,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} loss {} lr {}", self.epoch, self.mean_loss, self.lr)?;
        if let Some(d) = self.mean_distill_loss {
            write!(f, " distill {d}")?;
        }
        Ok(())
    }
}

/// Full-utterance features, computed once per corpus and sliced for crops.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    feats: Vec<Tensor>,
}

impl FeatureCache {
    pub fn build(fbank: &Fbank, utts: &[Utterance]) -> Result<Self> {
        let feats = utts
            .iter()
            .map(|u| fbank.compute(&u.samples))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache { feats })
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.feats[i]
    }

    pub fn iter_data(&self) -> impl Iterator<Item = &[f64]> {
        self.feats.iter().map(Tensor::data)
    }
}

/// Where a training crop sits in its utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Crop {
    pub start: usize,
    pub len: usize,
}

/// Draws a crop of `crop_len` samples (the whole utterance when shorter).
///
/// Starts are restricted to positions where the crop's interior frames, after
/// `left_pad` padding samples are prepended, line up with the utterance's own
/// frame grid, so those frames can be taken from the feature cache.
pub(crate) fn draw_crop<R: Rng + ?Sized>(
    num_samples: usize,
    crop_len: usize,
    left_pad: usize,
    shift: usize,
    rng: &mut R,
) -> Crop {
    if num_samples <= crop_len {
        return Crop {
            start: 0,
            len: num_samples,
        };
    }
    let first = left_pad % shift;
    let last = num_samples - crop_len;
    let start = if first <= last {
        first + shift * rng.random_range(0..=(last - first) / shift)
    } else {
        rng.random_range(0..=last)
    };
    Crop {
        start,
        len: crop_len,
    }
}

/// Log-Mel features `[frames, mels]` of `concat(w[..n/2], crop, w[n/2..])` on
/// the tape, where `window` is the padding window of length `n` (or `None`).
///
/// Frames fully inside the crop come from the cache when the crop is aligned
/// (see [`draw_crop`]); frames that overlap padding are recomputed on the tape
/// so gradients reach the padding values.
pub(crate) fn crop_features(
    tape: &mut Tape,
    fbank: &Fbank,
    cached: &Tensor,
    samples: &[f64],
    crop: Crop,
    window: Option<Var>,
) -> Result<Var> {
    let n = window.map_or(0, |w| tape.shape(w)[0]);
    let a = n / 2;
    let (shift, frame_len) = (fbank.shift(), fbank.frame_len());
    let padded_len = crop.len + n;
    let frames = fbank.num_frames(padded_len);
    if frames == 0 {
        return Err(Error::invalid(
            "crop_features",
            format!("padded crop of {padded_len} samples is shorter than one frame"),
        ));
    }
    let build_padded = |tape: &mut Tape| -> Result<Var> {
        let x = tape.vector(samples[crop.start..crop.start + crop.len].to_vec());
        match window {
            Some(w) => crate::reprogram::pad_raw(tape, x, w),
            None => Ok(x),
        }
    };

    let aligned = (crop.start + shift - a % shift).is_multiple_of(shift) && crop.start >= a % shift;
    if !aligned || a + crop.len < frame_len {
        let padded = build_padded(tape)?;
        return fbank.forward(tape, padded);
    }
    // interior frames: f * shift >= a and f * shift + frame_len <= a + crop.len
    let f_lo = a.div_ceil(shift);
    let f_hi_excl = ((a + crop.len - frame_len) / shift + 1).min(frames);
    if f_lo >= f_hi_excl {
        let padded = build_padded(tape)?;
        return fbank.forward(tape, padded);
    }
    let row0 = (crop.start + f_lo * shift - a) / shift;
    let mels = fbank.num_mels();
    let count = f_hi_excl - f_lo;
    if row0 + count > cached.shape()[0] {
        return Err(Error::invalid("crop_features", "cache does not cover the crop"));
    }
    let interior = tape.constant(
        vec![count, mels],
        cached.data()[row0 * mels..(row0 + count) * mels].to_vec(),
    )?;
    if f_lo == 0 && f_hi_excl == frames {
        return Ok(interior);
    }
    let padded = build_padded(tape)?;
    let mut parts = Vec::with_capacity(3);
    if f_lo > 0 {
        parts.push(fbank.forward_frames(tape, padded, 0, f_lo)?);
    }
    parts.push(interior);
    if f_hi_excl < frames {
        parts.push(fbank.forward_frames(tape, padded, f_hi_excl, frames - f_hi_excl)?);
    }
    tape.concat(&parts, 0)
}

/// Shuffled mini-batches of example indices.
pub(crate) fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_finite(stage: &str, epoch: usize, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "{stage}: epoch {epoch} step {step} produced loss {loss}"
        )))
    }
}

/// Integer labels for utterances, indexing their speaker in first-appearance order.
pub(crate) fn speaker_labels(utts: &[Utterance]) -> (Vec<String>, Vec<usize>) {
    let ids = crate::data::speaker_ids(utts);
    let labels = utts
        .iter()
        .map(|u| ids.iter().position(|s| *s == u.speaker_id).expect("listed"))
        .collect();
    (ids, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FbankConfig;
    use rand::SeedableRng;

    #[test]
    fn cached_crop_features_match_direct_computation() {
        let fbank = Fbank::new(FbankConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<f64> = (0..9000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let cached = fbank.compute(&samples).unwrap();
        for n in [0usize, 1, 2, 300, 800, 801, 1600] {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
            for _ in 0..5 {
                let crop = draw_crop(samples.len(), 4000, n / 2, 160, &mut rng);
                let mut t = Tape::new();
                let wv = (n > 0).then(|| t.param(vec![n], w.clone()).unwrap());
                let fast = crop_features(&mut t, &fbank, &cached, &samples, crop, wv).unwrap();
                let padded = crate::reprogram::pad_samples(
                    &samples[crop.start..crop.start + crop.len],
                    &w,
                );
                let direct = fbank.compute(&padded).unwrap();
                assert_eq!(t.shape(fast), direct.shape());
                for (a, b) in t.value(fast).iter().zip(direct.data()) {
                    assert!((a - b).abs() < 1e-9, "n={n}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn crops_fit_and_align() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c = draw_crop(12_000, 8000, 400, 160, &mut rng);
            assert!(c.start + c.len <= 12_000);
            assert_eq!((c.start + 160 - 400 % 160) % 160, 0);
        }
        let c = draw_crop(5000, 8000, 0, 160, &mut rng);
        assert_eq!((c.start, c.len), (0, 5000));
    }
}
