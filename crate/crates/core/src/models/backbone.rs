use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::Fbank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_conv_blocks: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub embedding_dim: usize,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_conv_blocks: 3,
            channels: 32,
            kernel_size: 5,
            embedding_dim: 64,
            frozen: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::config("backbone embedding_dim must be >= 2"));
        }
        if self.channels == 0 || self.kernel_size == 0 {
            return Err(Error::config("backbone channels and kernel_size must be >= 1"));
        }
        Ok(())
    }

    /// Frames consumed by the stack of valid convolutions.
    pub fn min_frames(&self) -> usize {
        conv_stack_min_frames(self.num_conv_blocks, self.kernel_size)
    }
}

pub(crate) fn conv_stack_min_frames(blocks: usize, kernel: usize) -> usize {
    (blocks * (kernel - 1) + 1).max(kernel)
}

/// Counts how the embedding network has been driven.
///
/// `forward` counts every pass; `backward` counts passes recorded so that
/// gradients can flow through the network (trainable weights or a
/// gradient-carrying input).
#[derive(Debug, Default)]
pub struct ForwardProbe {
    forward: AtomicUsize,
    backward: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeCounts {
    pub forward: usize,
    pub backward: usize,
}

impl ForwardProbe {
    pub fn counts(&self) -> ProbeCounts {
        ProbeCounts {
            forward: self.forward.load(Ordering::Relaxed),
            backward: self.backward.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }
}

/// Per-Mel standardisation applied to input features before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(num_mels: usize) -> Self {
        FeatureNorm {
            mean: vec![0.0; num_mels],
            std: vec![1.0; num_mels],
        }
    }

    /// Per-column mean and standard deviation over a set of `[frames, mels]` matrices.
    pub fn fit<'a>(num_mels: usize, feats: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut sum = vec![0.0; num_mels];
        let mut sq = vec![0.0; num_mels];
        let mut count = 0usize;
        for f in feats {
            for row in f.chunks(num_mels) {
                for m in 0..num_mels {
                    sum[m] += row[m];
                    sq[m] += row[m] * row[m];
                }
                count += 1;
            }
        }
        if count == 0 {
            return FeatureNorm::identity(num_mels);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(1e-6).sqrt())
            .collect();
        FeatureNorm { mean, std }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let m = tape.vector(self.mean.clone());
        let s = tape.vector(self.std.clone());
        let centered = tape.sub(feats, m)?;
        tape.div(centered, s)
    }
}

/// Mean and standard deviation over `axis`, concatenated.
pub(crate) fn stats_pool(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    let mean = tape.mean_axis(x, axis)?;
    let var = tape.variance_axis(x, axis)?;
    let std = tape.sqrt(var);
    tape.concat(&[mean, std], 0)
}

/// `[1, n] x [n, m] + [m]`, returned as a 1-D vector.
pub(crate) fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let row = tape.reshape(x, vec![1, n])?;
    let y = tape.matmul(row, weight)?;
    let y = tape.add(y, bias)?;
    let m = tape.value(y).len();
    tape.reshape(y, vec![m])
}

/// The frozen embedding extractor: valid 1-D convolutions over time with
/// relu, statistics pooling, and a linear map to the embedding.
#[derive(Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    num_mels: usize,
    norm: FeatureNorm,
    params: ParamStore,
    probe: ForwardProbe,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Backbone {
            cfg: self.cfg.clone(),
            num_mels: self.num_mels,
            norm: self.norm.clone(),
            params: self.params.clone(),
            probe: ForwardProbe::default(),
        }
    }
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: BackboneConfig, num_mels: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let c = cfg.channels;
        for b in 0..cfg.num_conv_blocks {
            let c_in = if b == 0 { num_mels } else { c };
            let std = (2.0 / (c_in * cfg.kernel_size) as f64).sqrt();
            params.gaussian(rng, &format!("conv{b}.weight"), vec![c, c_in, cfg.kernel_size], std);
            params.zeros(&format!("conv{b}.bias"), vec![c, 1]);
        }
        let pooled = if cfg.num_conv_blocks == 0 { num_mels } else { c } * 2;
        params.gaussian(
            rng,
            "embed.weight",
            vec![pooled, cfg.embedding_dim],
            (1.0 / pooled as f64).sqrt(),
        );
        params.zeros("embed.bias", vec![cfg.embedding_dim]);
        if !cfg.frozen {
            params.set_trainable(true);
        }
        Ok(Backbone {
            cfg,
            num_mels,
            norm: FeatureNorm::identity(num_mels),
            params,
            probe: ForwardProbe::default(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn num_mels(&self) -> usize {
        self.num_mels
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn norm(&self) -> &FeatureNorm {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: FeatureNorm) {
        self.norm = norm;
    }

    pub fn is_frozen(&self) -> bool {
        self.cfg.frozen
    }

    /// Freezes the weights: later passes bind them as constants and any
    /// existing gradient buffers are dropped.
    pub fn freeze(&mut self) {
        self.cfg.frozen = true;
        self.params.set_trainable(false);
    }

    pub fn probe(&self) -> &ForwardProbe {
        &self.probe
    }

    /// Binds the weights: trainable leaves unless the backbone is frozen.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.bind(tape, !self.cfg.frozen)
    }

    /// Embedding `[embedding_dim]` of features `[frames, num_mels]`.
    pub fn forward(&self, tape: &mut Tape, weights: &[Var], features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.num_mels {
            return Err(Error::invalid(
                "backbone",
                format!("expected features [frames, {}], got {shape:?}", self.num_mels),
            ));
        }
        if shape[0] < self.cfg.min_frames() {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "{} frames is fewer than the {} the convolution stack needs",
                    shape[0],
                    self.cfg.min_frames()
                ),
            ));
        }
        self.probe.forward.fetch_add(1, Ordering::Relaxed);
        let differentiable =
            tape.requires_grad(features) || weights.iter().any(|&w| tape.requires_grad(w));
        if differentiable {
            self.probe.backward.fetch_add(1, Ordering::Relaxed);
        }

        let x = self.norm.apply(tape, features)?;
        let mut h = tape.transpose(x)?;
        for b in 0..self.cfg.num_conv_blocks {
            let y = tape.conv1d(h, weights[2 * b])?;
            let y = tape.add(y, weights[2 * b + 1])?;
            h = tape.relu(y);
        }
        let pooled = stats_pool(tape, h, 1)?;
        let n = 2 * self.cfg.num_conv_blocks;
        linear(tape, pooled, weights[n], weights[n + 1])
    }

    pub(crate) fn from_parts(
        cfg: BackboneConfig,
        num_mels: usize,
        norm: FeatureNorm,
        params: ParamStore,
    ) -> Self {
        Backbone {
            cfg,
            num_mels,
            norm,
            params,
            probe: ForwardProbe::default(),
        }
    }
}

/// Forward-only access to an embedding model. Implementations take and
/// return plain sample buffers, so no gradient can be requested through them.
pub trait BlackBoxEmbedder {
    fn embed(&self, waveform: &[f64]) -> Result<Vec<f64>>;
    fn embedding_dim(&self) -> usize;
}

/// Waveform-to-embedding pipeline (front end + backbone) used for scoring
/// and as the opaque model during gradient-estimated adaptation.
#[derive(Debug, Clone, Copy)]
pub struct Embedder<'a> {
    pub fbank: &'a Fbank,
    pub backbone: &'a Backbone,
}

impl<'a> Embedder<'a> {
    pub fn new(fbank: &'a Fbank, backbone: &'a Backbone) -> Self {
        Embedder { fbank, backbone }
    }
}

impl BlackBoxEmbedder for Embedder<'_> {
    fn embed(&self, waveform: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let weights = self.backbone.params.bind(&mut tape, false)?;
        let x = tape.vector(waveform.to_vec());
        let feats = self.fbank.forward(&mut tape, x)?;
        let e = self.backbone.forward(&mut tape, &weights, feats)?;
        Ok(tape.value(e).to_vec())
    }

    fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone(frozen: bool) -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig {
            frozen,
            ..Default::default()
        };
        Backbone::new(cfg, 8, &mut rng).unwrap()
    }

    fn embed(b: &Backbone, feats: &Tensor) -> Vec<f64> {
        let mut t = Tape::new();
        let w = b.bind(&mut t).unwrap();
        let f = t.constant_tensor(feats);
        let e = b.forward(&mut t, &w, f).unwrap();
        t.value(e).to_vec()
    }

    #[test]
    fn identical_inputs_identical_embeddings() {
        let b = backbone(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..20 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = Tensor::new(vec![20, 8], data).unwrap();
        let e = embed(&b, &f);
        assert_eq!(e.len(), 64);
        assert_eq!(e, embed(&b, &f));
    }

    #[test]
    fn time_constant_features_have_zero_pooled_std() {
        let b = backbone(true);
        let row: Vec<f64> = (0..8).map(|m| m as f64 * 0.3 - 1.0).collect();
        let f = Tensor::new(vec![20, 8], row.repeat(20)).unwrap();

        let mut t = Tape::new();
        let w = b.bind(&mut t).unwrap();
        let fv = t.constant_tensor(&f);
        let x = b.norm.apply(&mut t, fv).unwrap();
        let mut h = t.transpose(x).unwrap();
        for k in 0..3 {
            let y = t.conv1d(h, w[2 * k]).unwrap();
            let y = t.add(y, w[2 * k + 1]).unwrap();
            h = t.relu(y);
        }
        let pooled = stats_pool(&mut t, h, 1).unwrap();
        let p = t.value(pooled).to_vec();
        assert!(p[32..].iter().all(|&s| s < 1e-12), "std part {:?}", &p[32..]);

        // embedding equals the linear map of (mean, 0)
        let mut expected = b.params.get(7).data().to_vec();
        let weight = b.params.get(6).data();
        for i in 0..32 {
            for j in 0..64 {
                expected[j] += p[i] * weight[i * 64 + j];
            }
        }
        let e = embed(&b, &f);
        for (a, x) in e.iter().zip(&expected) {
            assert!((a - x).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let b = backbone(true);
        let f = Tensor::zeros(vec![12, 8]);
        let mut t = Tape::new();
        let w = b.bind(&mut t).unwrap();
        let fv = t.constant_tensor(&f);
        let err = b.forward(&mut t, &w, fv).unwrap_err().to_string();
        assert!(err.contains("frames"), "{err}");
    }

    #[test]
    fn frozen_backbone_passes_gradient_to_input_only() {
        let b = backbone(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..16 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let w = b.bind(&mut t).unwrap();
        assert!(w.iter().all(|&v| !t.requires_grad(v)));
        let f = t.param(vec![16, 8], data).unwrap();
        let e = b.forward(&mut t, &w, f).unwrap();
        let loss = t.sum(e);
        let g = t.backward(loss).unwrap();
        assert!(g.get(f).unwrap().iter().any(|&v| v != 0.0));
        assert!(w.iter().all(|&v| g.get(v).is_none()));
        assert_eq!(b.probe().counts(), ProbeCounts { forward: 1, backward: 1 });
    }
}
