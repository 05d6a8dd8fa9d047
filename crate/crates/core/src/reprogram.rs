//! Learnable input padding: a trainable waveform segment split around each
//! utterance, with random segment crops at training time and one padded copy
//! per segment at scoring time.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::Checkpoint;

/// Trainable padding of total length `l`, viewed as `k` segments of
/// `n = l / k` samples each.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddingParams {
    values: Tensor,
    num_segments: usize,
    init_std: f64,
}

impl PaddingParams {
    pub fn new<R: Rng + ?Sized>(
        total_len: usize,
        num_segments: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_shape(total_len, num_segments)?;
        if !(init_std >= 0.0 && init_std.is_finite()) {
            return Err(Error::config("padding init_std must be finite and >= 0"));
        }
        let data = crate::models::gaussian_init(rng, total_len, init_std);
        Ok(PaddingParams {
            values: Tensor::from_vec(data).named("padding").requires_grad(true),
            num_segments,
            init_std,
        })
    }

    pub fn from_values(values: Vec<f64>, num_segments: usize, init_std: f64) -> Result<Self> {
        check_shape(values.len(), num_segments)?;
        Ok(PaddingParams {
            values: Tensor::from_vec(values).named("padding").requires_grad(true),
            num_segments,
            init_std,
        })
    }

    /// Total padding length `l`.
    pub fn total_len(&self) -> usize {
        self.values.len()
    }

    /// Segment count `k`.
    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    /// Segment length `n = l / k`.
    pub fn segment_len(&self) -> usize {
        self.values.len() / self.num_segments
    }

    pub fn init_std(&self) -> f64 {
        self.init_std
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        let n = self.segment_len();
        &self.values.data()[i * n..(i + 1) * n]
    }

    /// Records the padding as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.leaf(&self.values)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "total_len": self.total_len(),
            "num_segments": self.num_segments,
            "init_std": self.init_std,
        });
        let mut ck = Checkpoint::new("padding", meta);
        ck.push("values", Tensor::from_vec(self.values.data().to_vec()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("padding")?;
        let l: usize = ck.meta_field("total_len")?;
        let k: usize = ck.meta_field("num_segments")?;
        let init_std: f64 = ck.meta_field("init_std")?;
        let values = ck.tensor("values")?.data().to_vec();
        if values.len() != l {
            return Err(Error::invalid(
                "padding",
                format!("checkpoint declares l={l} but stores {} values", values.len()),
            ));
        }
        PaddingParams::from_values(values, k, init_std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        PaddingParams::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn check_shape(l: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("padding segment count k must be >= 1"));
    }
    if !l.is_multiple_of(k) {
        return Err(Error::config(format!(
            "padding length l={l} is not divisible by segment count k={k}"
        )));
    }
    Ok(())
}

/// `concat(w[..n/2], x, w[n/2..])` on plain buffers.
pub fn pad_samples(x: &[f64], w: &[f64]) -> Vec<f64> {
    let half = w.len() / 2;
    let mut out = Vec::with_capacity(x.len() + w.len());
    out.extend_from_slice(&w[..half]);
    out.extend_from_slice(x);
    out.extend_from_slice(&w[half..]);
    out
}

/// `concat(w[..n/2], x, w[n/2..])` on the tape; an empty `w` returns `x` itself.
pub fn pad_raw(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    for (v, what) in [(x, "waveform"), (w, "padding")] {
        if tape.shape(v).len() != 1 {
            return Err(Error::invalid(
                "pad_raw",
                format!("{what} must be 1-D, got {:?}", tape.shape(v)),
            ));
        }
    }
    let n = tape.shape(w)[0];
    if n == 0 {
        return Ok(x);
    }
    let half = n / 2;
    let mut parts = Vec::with_capacity(3);
    if half > 0 {
        parts.push(tape.slice(w, 0, 0, half)?);
    }
    parts.push(x);
    parts.push(tape.slice(w, 0, half, n - half)?);
    tape.concat(&parts, 0)
}

/// Pads `x` with the window `padding[offset..offset + n]`.
pub fn crop_and_pad_at(
    tape: &mut Tape,
    padding: Var,
    segment_len: usize,
    offset: usize,
    x: Var,
) -> Result<Var> {
    let l = tape.shape(padding)[0];
    if offset + segment_len > l {
        return Err(Error::invalid(
            "crop_and_pad",
            format!("window {offset}..{} exceeds padding length {l}", offset + segment_len),
        ));
    }
    if segment_len == 0 {
        return Ok(x);
    }
    let window = tape.slice(padding, 0, offset, segment_len)?;
    pad_raw(tape, x, window)
}

/// Training-time padding: a window of `n` contiguous values starting at an
/// offset drawn uniformly from `[0, l - n]`. Returns the padded waveform and
/// the offset used.
pub fn crop_and_pad_train<R: Rng + ?Sized>(
    tape: &mut Tape,
    padding: Var,
    params: &PaddingParams,
    x: Var,
    rng: &mut R,
) -> Result<(Var, usize)> {
    let offset = train_offset(params, rng);
    Ok((crop_and_pad_at(tape, padding, params.segment_len(), offset, x)?, offset))
}

/// Start of a training window, uniform in `[0, l - n]`.
pub fn train_offset<R: Rng + ?Sized>(params: &PaddingParams, rng: &mut R) -> usize {
    rng.random_range(0..=params.total_len() - params.segment_len())
}

/// Inference-time padding: one copy of `x` per segment, copy `i` padded with
/// `padding[i*n..(i+1)*n]`.
pub fn expand_and_pad_infer(x: &[f64], params: &PaddingParams) -> Vec<Vec<f64>> {
    (0..params.num_segments())
        .map(|i| pad_samples(x, params.segment(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Mean of all `k * k` entries.
    #[default]
    MeanAll,
    /// Mean of the entries off the main diagonal; needs `k >= 2`.
    MeanOffdiag,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::MeanAll => "mean_all",
            ScoreMode::MeanOffdiag => "mean_offdiag",
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_all" => Ok(ScoreMode::MeanAll),
            "mean_offdiag" => Ok(ScoreMode::MeanOffdiag),
            other => Err(Error::config(format!(
                "unknown score mode `{other}` (expected mean_all or mean_offdiag)"
            ))),
        }
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (mut dot, mut qa, mut qb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        qa += x * x;
        qb += y * y;
    }
    if qa == 0.0 || qb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    Ok(dot / (qa.sqrt() * qb.sqrt()))
}

/// `S[i][j] = cos(enroll[i], test[j])`.
pub fn score_matrix(enroll: &[Vec<f64>], test: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if enroll.len() != test.len() || enroll.is_empty() {
        return Err(Error::invalid(
            "score_matrix",
            format!(
                "need the same non-zero number of copies, got {} and {}",
                enroll.len(),
                test.len()
            ),
        ));
    }
    enroll
        .iter()
        .map(|e| test.iter().map(|t| cosine(e, t)).collect())
        .collect()
}

pub fn trial_score(scores: &[Vec<f64>], mode: ScoreMode) -> Result<f64> {
    let k = scores.len();
    match mode {
        ScoreMode::MeanAll => {
            let sum: f64 = scores.iter().flatten().sum();
            Ok(sum / (k * k) as f64)
        }
        ScoreMode::MeanOffdiag => {
            if k < 2 {
                return Err(Error::invalid(
                    "trial_score",
                    "mean_offdiag needs at least 2 segments",
                ));
            }
            let mut sum = 0.0;
            for (i, row) in scores.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if i != j {
                        sum += v;
                    }
                }
            }
            Ok(sum / (k * (k - 1)) as f64)
        }
    }
}
