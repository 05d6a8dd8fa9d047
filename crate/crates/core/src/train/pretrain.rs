use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    batches, check_finite, crop_features, draw_crop, speaker_labels, EpochStats, ExperimentConfig,
    FeatureCache, SpeakerModel,
};
use crate::autograd::{AdamState, Tape};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::models::{aam_loss, classify, BackboneConfig, FeatureNorm};

/// Trains backbone and head with the margin loss on random crops of the
/// source corpus, then freezes the backbone.
pub fn pretrain(
    source: &[Utterance],
    cfg: &ExperimentConfig,
) -> Result<(SpeakerModel, Vec<EpochStats>)> {
    cfg.validate()?;
    let cfg = cfg.effective();
    let (speakers, labels) = speaker_labels(source);
    if speakers.len() < 2 {
        return Err(Error::config("pretraining needs at least 2 speakers"));
    }
    let backbone_cfg = BackboneConfig {
        frozen: false,
        ..cfg.backbone.clone()
    };
    let mut model = SpeakerModel::init(cfg.fbank.clone(), backbone_cfg, speakers.len(), cfg.seed)?;
    let cache = FeatureCache::build(&model.fbank, source)?;
    model
        .backbone
        .set_norm(FeatureNorm::fit(model.fbank.num_mels(), cache.iter_data()));

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crop_rng.set_stream(2);

    let crop_len = cfg.crop_samples();
    let shift = model.fbank.shift();
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        adam.learning_rate = cfg.lr_at(epoch);
        let mut total = 0.0;
        for (step, batch) in batches(source.len(), cfg.batch_size, &mut shuffle_rng)
            .into_iter()
            .enumerate()
        {
            let SpeakerModel {
                fbank,
                backbone,
                head,
            } = &mut model;
            for &i in &batch {
                tape.clear();
                let crop = draw_crop(source[i].samples.len(), crop_len, 0, shift, &mut crop_rng);
                let feats =
                    crop_features(&mut tape, fbank, cache.get(i), &source[i].samples, crop, None)?;
                let bw = backbone.bind(&mut tape)?;
                let hw = head.bind(&mut tape, true)?;
                let emb = backbone.forward(&mut tape, &bw, feats)?;
                let logits = classify(&mut tape, hw, emb)?;
                let loss = aam_loss(&mut tape, logits, labels[i], &cfg.aam)?;
                let value = tape.scalar(loss);
                check_finite("pretrain", epoch, step, value)?;
                total += value;
                let grads = tape.backward(loss)?;
                backbone.params_mut().accumulate(&grads, &bw)?;
                head.params_mut().accumulate(&grads, &[hw])?;
            }
            let scale = 1.0 / batch.len() as f64;
            backbone.params_mut().scale_grads(scale);
            head.params_mut().scale_grads(scale);
            let mut params = backbone.params_mut().tensors_mut();
            params.extend(head.params_mut().tensors_mut());
            adam.step(&mut params)?;
            params.into_iter().for_each(|p| p.zero_grad());
        }
        log.push(EpochStats {
            epoch,
            mean_loss: total / source.len() as f64,
            lr: adam.learning_rate,
            mean_distill_loss: None,
        });
    }
    model.backbone.freeze();
    Ok((model, log))
}
