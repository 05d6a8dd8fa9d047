use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{conv_stack_min_frames, linear, stats_pool, FeatureNorm};
use super::params::ParamStore;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
    /// One set of attention and convolution weights reused by every block.
    pub shared_weights: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            channels: 32,
            num_blocks: 3,
            kernel_size: 5,
            shared_weights: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel_size == 0 {
            return Err(Error::config("estimator channels and kernel_size must be >= 1"));
        }
        Ok(())
    }

    pub fn min_frames(&self) -> usize {
        conv_stack_min_frames(self.num_blocks, self.kernel_size)
    }
}

/// Differentiable stand-in for a black-box embedder. Each block runs
/// single-head self-attention over frames (residual), a valid 1-D
/// convolution over time, and relu; the result is statistics-pooled and
/// mapped to the embedding size of the model it imitates.
#[derive(Debug, Clone)]
pub struct Estimator {
    cfg: EstimatorConfig,
    num_mels: usize,
    embedding_dim: usize,
    norm: FeatureNorm,
    params: ParamStore,
}

// Parameter layout: input projection (2), per distinct block (q, k, v, conv, conv bias),
// output projection (2).
const BLOCK_PARAMS: usize = 5;

impl Estimator {
    pub fn new<R: Rng + ?Sized>(
        cfg: EstimatorConfig,
        num_mels: usize,
        embedding_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut params = ParamStore::new();
        params.gaussian(rng, "input.weight", vec![num_mels, c], (2.0 / num_mels as f64).sqrt());
        params.zeros("input.bias", vec![c]);
        let distinct = if cfg.shared_weights { cfg.num_blocks.min(1) } else { cfg.num_blocks };
        let attn_std = (1.0 / c as f64).sqrt();
        for b in 0..distinct {
            for p in ["q", "k", "v"] {
                params.gaussian(rng, &format!("block{b}.{p}"), vec![c, c], attn_std);
            }
            let conv_std = (2.0 / (c * cfg.kernel_size) as f64).sqrt();
            params.gaussian(rng, &format!("block{b}.conv"), vec![c, c, cfg.kernel_size], conv_std);
            params.zeros(&format!("block{b}.conv_bias"), vec![c, 1]);
        }
        params.gaussian(
            rng,
            "output.weight",
            vec![2 * c, embedding_dim],
            (1.0 / (2 * c) as f64).sqrt(),
        );
        params.zeros("output.bias", vec![embedding_dim]);
        params.set_trainable(true);
        Ok(Estimator {
            cfg,
            num_mels,
            embedding_dim,
            norm: FeatureNorm::identity(num_mels),
            params,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn num_mels(&self) -> usize {
        self.num_mels
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
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

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params.bind(tape, trainable)
    }

    /// Embedding `[embedding_dim]` of features `[frames, num_mels]`.
    pub fn forward(&self, tape: &mut Tape, weights: &[Var], features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.num_mels {
            return Err(Error::invalid(
                "estimator",
                format!("expected features [frames, {}], got {shape:?}", self.num_mels),
            ));
        }
        if shape[0] < self.cfg.min_frames() {
            return Err(Error::invalid(
                "estimator",
                format!(
                    "{} frames is fewer than the {} the block stack needs",
                    shape[0],
                    self.cfg.min_frames()
                ),
            ));
        }
        let c = self.cfg.channels;
        let x = self.norm.apply(tape, features)?;
        let h = tape.matmul(x, weights[0])?;
        let h = tape.add(h, weights[1])?;
        // [frames, channels]
        let mut h = tape.relu(h);
        let inv_sqrt_c = 1.0 / (c as f64).sqrt();
        for b in 0..self.cfg.num_blocks {
            let base = 2 + if self.cfg.shared_weights { 0 } else { b * BLOCK_PARAMS };
            let q = tape.matmul(h, weights[base])?;
            let k = tape.matmul(h, weights[base + 1])?;
            let v = tape.matmul(h, weights[base + 2])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt_c);
            let attn = tape.softmax(scores)?;
            let mixed = tape.matmul(attn, v)?;
            let h_res = tape.add(h, mixed)?;
            let ht = tape.transpose(h_res)?;
            let y = tape.conv1d(ht, weights[base + 3])?;
            let y = tape.add(y, weights[base + 4])?;
            let y = tape.relu(y);
            h = tape.transpose(y)?;
        }
        let pooled = stats_pool(tape, h, 0)?;
        let n = weights.len();
        linear(tape, pooled, weights[n - 2], weights[n - 1])
    }

    pub(crate) fn from_parts(
        cfg: EstimatorConfig,
        num_mels: usize,
        embedding_dim: usize,
        norm: FeatureNorm,
        params: ParamStore,
    ) -> Self {
        Estimator {
            cfg,
            num_mels,
            embedding_dim,
            norm,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check_gradients, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(shared: bool) -> Estimator {
        let cfg = EstimatorConfig {
            channels: 6,
            num_blocks: 2,
            kernel_size: 3,
            shared_weights: shared,
        };
        Estimator::new(cfg, 5, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn shared_weights_use_one_block() {
        let shared = Estimator::new(EstimatorConfig::default(), 64, 64, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let split = Estimator::new(
            EstimatorConfig {
                shared_weights: false,
                ..Default::default()
            },
            64,
            64,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let block = 3 * 32 * 32 + 32 * 32 * 5 + 32;
        assert_eq!(split.params().num_elements() - shared.params().num_elements(), 2 * block);
        assert_eq!(shared.params().len(), 2 + BLOCK_PARAMS + 2);
    }

    #[test]
    fn minimum_length_input() {
        let e = small(true);
        let frames = e.config().min_frames();
        let mut t = Tape::new();
        let w = e.bind(&mut t, false).unwrap();
        let f = t.constant(vec![frames, 5], vec![0.3; frames * 5]).unwrap();
        let out = e.forward(&mut t, &w, f).unwrap();
        assert_eq!(t.shape(out), &[4]);
        assert!(t.value(out).iter().all(|v| v.is_finite()));

        let f = t.constant(vec![frames - 1, 5], vec![0.3; (frames - 1) * 5]).unwrap();
        assert!(e.forward(&mut t, &w, f).is_err());
    }

    #[test]
    fn gradient_wrt_input_matches_finite_differences() {
        for shared in [true, false] {
            let e = small(shared);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let point: Vec<f64> = (0..9 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = check_gradients(
                |t, x| {
                    let w = e.bind(t, false)?;
                    let f = t.reshape(x, vec![9, 5])?;
                    let out = e.forward(t, &w, f)?;
                    let sq = t.pow(out, 2.0);
                    Ok(t.sum(sq))
                },
                &Tensor::from_vec(point.clone()),
                1e-5,
                &[],
            )
            .unwrap();
            assert!(err < 1e-4, "shared={shared}: {err}");
        }
    }
}
