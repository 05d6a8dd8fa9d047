//! Embedding networks: the frozen backbone, the differentiable estimator used
//! when the backbone is only reachable through forward calls, and the cosine
//! classifier head with its margin loss.

mod backbone;
mod checkpoint;
mod estimator;
mod head;
mod params;

use std::path::Path;

pub use backbone::{
    Backbone, BackboneConfig, BlackBoxEmbedder, Embedder, FeatureNorm, ForwardProbe, ProbeCounts,
};
pub use checkpoint::Checkpoint;
pub use estimator::{Estimator, EstimatorConfig};
pub use head::{aam_loss, classify, AamConfig, ClassifierHead};
pub use params::ParamStore;
pub(crate) use params::gaussian_vec as gaussian_init;

use rand::SeedableRng;

use crate::autograd::Tensor;
use crate::error::Result;

fn norm_tensors(ck: &mut Checkpoint, norm: &FeatureNorm) {
    ck.push("norm.mean", Tensor::from_vec(norm.mean.clone()));
    ck.push("norm.std", Tensor::from_vec(norm.std.clone()));
}

fn norm_from(ck: &Checkpoint) -> Result<FeatureNorm> {
    Ok(FeatureNorm {
        mean: ck.tensor("norm.mean")?.data().to_vec(),
        std: ck.tensor("norm.std")?.data().to_vec(),
    })
}

impl Backbone {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config(),
            "num_mels": self.num_mels(),
        });
        let mut ck = Checkpoint::new("backbone", meta);
        norm_tensors(&mut ck, self.norm());
        ck.extend(self.params().named("param."));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("backbone")?;
        let cfg: BackboneConfig = ck.meta_field("config")?;
        let num_mels: usize = ck.meta_field("num_mels")?;
        // Build the layout with throwaway values, then overwrite from the file.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Backbone::new(cfg.clone(), num_mels, &mut rng)?;
        let mut params = template.params().clone();
        params.load_named("param.", &ck.tensors)?;
        params.set_trainable(!cfg.frozen);
        Ok(Backbone::from_parts(cfg, num_mels, norm_from(ck)?, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Backbone::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Estimator {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config(),
            "num_mels": self.num_mels(),
            "embedding_dim": self.embedding_dim(),
        });
        let mut ck = Checkpoint::new("estimator", meta);
        norm_tensors(&mut ck, self.norm());
        ck.extend(self.params().named("param."));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("estimator")?;
        let cfg: EstimatorConfig = ck.meta_field("config")?;
        let num_mels: usize = ck.meta_field("num_mels")?;
        let dim: usize = ck.meta_field("embedding_dim")?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Estimator::new(cfg.clone(), num_mels, dim, &mut rng)?;
        let mut params = template.params().clone();
        params.load_named("param.", &ck.tensors)?;
        Ok(Estimator::from_parts(cfg, num_mels, dim, norm_from(ck)?, params))
    }
}

impl ClassifierHead {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("head", serde_json::Value::Null);
        ck.extend(self.params().named("param."));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("head")?;
        let w = ck.tensor("param.projection")?;
        let mut params = ParamStore::new();
        params.push(w.clone().named("projection"));
        params.set_trainable(true);
        Ok(ClassifierHead::from_parts(params))
    }
}
