use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{Fbank, FbankConfig};
use crate::models::{Backbone, BackboneConfig, Checkpoint, ClassifierHead, Embedder, ParamStore};

/// Front end, backbone and the classifier head it was trained with.
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub fbank: Fbank,
    pub backbone: Backbone,
    pub head: ClassifierHead,
}

impl SpeakerModel {
    pub fn embedder(&self) -> Embedder<'_> {
        Embedder::new(&self.fbank, &self.backbone)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let b = self.backbone.to_checkpoint();
        let meta = serde_json::json!({
            "fbank": self.fbank.config(),
            "backbone": b.meta,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let mut ck = Checkpoint::new("speaker_model", meta);
        for (name, t) in b.tensors {
            ck.push(format!("backbone.{name}"), t);
        }
        for (name, t) in self.head.to_checkpoint().tensors {
            ck.push(format!("head.{name}"), t);
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("speaker_model")?;
        let version: String = ck.meta_field("version")?;
        if version != env!("CARGO_PKG_VERSION") {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint written by version {version}, this build is {}",
                    env!("CARGO_PKG_VERSION")
                ),
            ));
        }
        let fbank_cfg: FbankConfig = ck.meta_field("fbank")?;
        let strip = |prefix: &str| -> Vec<(String, crate::autograd::Tensor)> {
            ck.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_owned(), t.clone())))
                .collect()
        };
        let backbone_ck = Checkpoint {
            kind: "backbone".into(),
            meta: ck.meta["backbone"].clone(),
            tensors: strip("backbone."),
        };
        let head_ck = Checkpoint {
            kind: "head".into(),
            meta: serde_json::Value::Null,
            tensors: strip("head."),
        };
        Ok(SpeakerModel {
            fbank: Fbank::new(fbank_cfg)?,
            backbone: Backbone::from_checkpoint(&backbone_ck)?,
            head: ClassifierHead::from_checkpoint(&head_ck)?,
        })
    }

    /// Untrained model, used by tests and as the pretraining starting point.
    pub fn init(
        fbank_cfg: FbankConfig,
        backbone_cfg: BackboneConfig,
        num_speakers: usize,
        seed: u64,
    ) -> Result<Self> {
        let fbank = Fbank::new(fbank_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(backbone_cfg, fbank.num_mels(), &mut rng)?;
        let head = ClassifierHead::new(backbone.embedding_dim(), num_speakers, &mut rng)?;
        Ok(SpeakerModel {
            fbank,
            backbone,
            head,
        })
    }

    pub fn backbone_params(&self) -> &ParamStore {
        self.backbone.params()
    }
}
