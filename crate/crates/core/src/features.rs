//! Differentiable log-Mel filterbank front end.
//!
//! The waveform is cut into Hann-windowed frames, projected onto cosine and
//! sine bases (a real DFT written as one matrix product), squared, summed
//! into triangular Mel bands and log-compressed. Every step is an op on the
//! [`Tape`], so gradients reach the waveform samples.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbankConfig {
    pub sample_rate_hz: u32,
    pub num_mels: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub fmin_hz: f64,
    /// Upper band edge; `None` means Nyquist.
    pub fmax_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            sample_rate_hz: 16_000,
            num_mels: 64,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            fft_size: 512,
            fmin_hz: 20.0,
            fmax_hz: None,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn frame_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn fmax(&self) -> f64 {
        self.fmax_hz.unwrap_or(self.sample_rate_hz as f64 / 2.0)
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        let (frame, shift) = (self.frame_samples(), self.shift_samples());
        if frame == 0 || shift == 0 {
            return Err(Error::config("fbank frame length and shift must be at least one sample"));
        }
        if self.fft_size < frame {
            return Err(Error::config(format!(
                "fbank fft_size {} is smaller than the frame ({frame} samples)",
                self.fft_size
            )));
        }
        if self.num_mels == 0 {
            return Err(Error::config("fbank num_mels must be >= 1"));
        }
        let fmax = self.fmax();
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < fmax && fmax <= nyquist) {
            return Err(Error::config(format!(
                "fbank band must satisfy 0 <= fmin < fmax <= {nyquist}, got [{}, {fmax}]",
                self.fmin_hz
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("fbank log_floor must be positive"));
        }
        Ok(())
    }

    /// `floor((t - frame) / shift) + 1`, or 0 when the signal is shorter than a frame.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        let frame = self.frame_samples();
        if num_samples < frame {
            0
        } else {
            (num_samples - frame) / self.shift_samples() + 1
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular Mel filters, `[num_mels, fft_size / 2 + 1]`.
///
/// Filter `i` rises from edge `i` to a peak at edge `i + 1` and falls to edge
/// `i + 2`, with the `num_mels + 2` edges equally spaced on the Mel scale
/// between `fmin` and `fmax`.
pub fn mel_matrix(cfg: &FbankConfig) -> Result<Tensor> {
    cfg.validate()?;
    let bins = cfg.num_bins();
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax()));
    let edges: Vec<f64> = (0..cfg.num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let mut w = vec![0.0; cfg.num_mels * bins];
    for m in 0..cfg.num_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * bin_hz;
            let v = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            w[m * bins + b] = v;
        }
    }
    Tensor::new(vec![cfg.num_mels, bins], w)
}

/// Symmetric Hann window.
fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Precomputed bases for one [`FbankConfig`].
#[derive(Debug, Clone)]
pub struct Fbank {
    cfg: FbankConfig,
    frame_len: usize,
    shift: usize,
    /// `[frame_len, 2 * bins]`: windowed cosines then windowed sines.
    dft_basis: Arc<Vec<f64>>,
    /// `[2 * bins, num_mels]`: the Mel matrix transposed, stacked twice so the
    /// real and imaginary squares are summed by the same product.
    mel_basis: Arc<Vec<f64>>,
}

impl Fbank {
    pub fn new(cfg: FbankConfig) -> Result<Self> {
        let mel = mel_matrix(&cfg)?;
        let (frame_len, shift, bins, n_fft) = (
            cfg.frame_samples(),
            cfg.shift_samples(),
            cfg.num_bins(),
            cfg.fft_size,
        );
        let window = hann(frame_len);
        let mut dft = vec![0.0; frame_len * 2 * bins];
        for (n, w) in window.iter().enumerate() {
            for b in 0..bins {
                let phase = 2.0 * PI * ((n * b) % n_fft) as f64 / n_fft as f64;
                dft[n * 2 * bins + b] = w * phase.cos();
                dft[n * 2 * bins + bins + b] = -w * phase.sin();
            }
        }
        let mut mel_t = vec![0.0; 2 * bins * cfg.num_mels];
        for m in 0..cfg.num_mels {
            for b in 0..bins {
                let v = mel.data()[m * bins + b];
                mel_t[b * cfg.num_mels + m] = v;
                mel_t[(bins + b) * cfg.num_mels + m] = v;
            }
        }
        Ok(Fbank {
            cfg,
            frame_len,
            shift,
            dft_basis: Arc::new(dft),
            mel_basis: Arc::new(mel_t),
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    pub fn num_mels(&self) -> usize {
        self.cfg.num_mels
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        self.cfg.num_frames(num_samples)
    }

    /// Largest analysis-window weight applied to each sample of a signal of
    /// `num_samples` samples; 0 for trailing samples no frame reaches.
    pub fn sample_coverage(&self, num_samples: usize) -> Vec<f64> {
        let window = self.window();
        let mut cover = vec![0.0f64; num_samples];
        for f in 0..self.num_frames(num_samples) {
            let s = f * self.shift;
            for (c, w) in cover[s..s + self.frame_len].iter_mut().zip(&window) {
                *c = c.max(*w);
            }
        }
        cover
    }

    fn window(&self) -> Vec<f64> {
        hann(self.frame_len)
    }

    /// Log-Mel features `[num_frames, num_mels]` of a 1-D waveform on the tape.
    ///
    /// Frames that overlap no gradient-carrying sample are computed from a
    /// detached copy of the waveform, so the reverse pass only runs through
    /// the frames that can actually reach a trainable input.
    pub fn forward(&self, tape: &mut Tape, waveform: Var) -> Result<Var> {
        let shape = tape.shape(waveform).to_vec();
        if shape.len() != 1 {
            return Err(Error::invalid(
                "fbank",
                format!("expected a 1-D waveform, got shape {shape:?}"),
            ));
        }
        let t = shape[0];
        let frames = self.num_frames(t);
        if frames == 0 {
            return Err(Error::invalid(
                "fbank",
                format!("waveform of {t} samples is shorter than one frame ({})", self.frame_len),
            ));
        }
        if let Some(bad) = tape.value(waveform).iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("fbank input sample {bad}")));
        }

        let support = tape.grad_support(waveform);
        let touches: Vec<bool> = (0..frames)
            .map(|f| {
                let s = f * self.shift;
                support[s..s + self.frame_len].iter().any(|&b| b)
            })
            .collect();
        let detached = if touches.iter().all(|&b| b) {
            None
        } else {
            Some(tape.detach(waveform))
        };

        let mut pieces = Vec::new();
        let mut start = 0;
        while start < frames {
            let flag = touches[start];
            let mut end = start + 1;
            while end < frames && touches[end] == flag {
                end += 1;
            }
            let src = if flag { waveform } else { detached.expect("mixed support") };
            pieces.push(self.log_mel(tape, src, start, end - start)?);
            start = end;
        }
        if pieces.len() == 1 {
            Ok(pieces[0])
        } else {
            tape.concat(&pieces, 0)
        }
    }

    /// Log-Mel features of frames `first..first + count` only, `[count, num_mels]`.
    pub fn forward_frames(
        &self,
        tape: &mut Tape,
        waveform: Var,
        first: usize,
        count: usize,
    ) -> Result<Var> {
        if count == 0 {
            return Err(Error::invalid("fbank", "frame range is empty"));
        }
        if let Some(bad) = tape.value(waveform).iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("fbank input sample {bad}")));
        }
        self.log_mel(tape, waveform, first, count)
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    fn log_mel(&self, tape: &mut Tape, wave: Var, first: usize, count: usize) -> Result<Var> {
        let bins = self.cfg.num_bins();
        let framed = tape.frames(wave, self.frame_len, self.shift, first, count)?;
        let dft = tape.constant_shared(vec![self.frame_len, 2 * bins], Arc::clone(&self.dft_basis))?;
        let spec = tape.matmul(framed, dft)?;
        let power = tape.pow(spec, 2.0);
        let mel = tape.constant_shared(vec![2 * bins, self.cfg.num_mels], Arc::clone(&self.mel_basis))?;
        let energy = tape.matmul(power, mel)?;
        let floored = tape.clamp_min(energy, self.cfg.log_floor);
        Ok(tape.log(floored))
    }

    /// Gradient-free convenience: features of a plain sample buffer.
    pub fn compute(&self, samples: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.vector(samples.to_vec());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.to_tensor(y))
    }
}
