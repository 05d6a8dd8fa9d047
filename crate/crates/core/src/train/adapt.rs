use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    batches, check_finite, crop_features, draw_crop, speaker_labels, EpochStats, ExperimentConfig,
    FeatureCache, SpeakerModel,
};
use crate::autograd::{AdamState, Tape, Tensor};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::features::Fbank;
use crate::models::{
    aam_loss, classify, BlackBoxEmbedder, ClassifierHead, Estimator, FeatureNorm,
};
use crate::reprogram::{train_offset, PaddingParams};

/// Trained adaptation state.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub padding: PaddingParams,
    pub head: ClassifierHead,
    /// The gradient estimator, for gradient-estimated adaptation with a non-empty padding.
    pub estimator: Option<Estimator>,
    pub log: Vec<EpochStats>,
}

struct Setup {
    cfg: ExperimentConfig,
    labels: Vec<usize>,
    padding: PaddingParams,
    head: ClassifierHead,
    train_head: bool,
    init_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    crop_rng: ChaCha8Rng,
}

fn setup(target: &[Utterance], cfg: &ExperimentConfig, embedding_dim: usize) -> Result<Setup> {
    cfg.validate()?;
    let cfg = cfg.effective();
    let (speakers, labels) = speaker_labels(target);
    if speakers.len() < 2 {
        return Err(Error::config("adaptation needs at least 2 target speakers"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(3);
    let padding =
        PaddingParams::new(cfg.padding.l, cfg.padding.k, cfg.padding.init_std, &mut init_rng)?;
    let mut head = ClassifierHead::new(embedding_dim, speakers.len(), &mut init_rng)?;
    // small-data mode drops the trainable classifier: a fixed random projection remains
    let train_head = !cfg.small_data_mode;
    head.params_mut().set_trainable(train_head);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(4);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crop_rng.set_stream(5);
    Ok(Setup {
        cfg,
        labels,
        padding,
        head,
        train_head,
        init_rng,
        shuffle_rng,
        crop_rng,
    })
}

fn step_params<'a>(
    padding: &'a mut PaddingParams,
    head: &'a mut ClassifierHead,
    train_head: bool,
) -> Vec<&'a mut Tensor> {
    let mut params = vec![padding.tensor_mut()];
    if train_head {
        params.extend(head.params_mut().tensors_mut());
    }
    params
}

/// White-box adaptation: the frozen backbone is differentiated through, and
/// only the padding and the classifier head are updated.
pub fn adapt_vanilla(
    model: &SpeakerModel,
    target: &[Utterance],
    cfg: &ExperimentConfig,
) -> Result<Adaptation> {
    if !model.backbone.is_frozen() {
        return Err(Error::invalid("adapt_vanilla", "backbone must be frozen"));
    }
    let before = model.backbone.params().fingerprint();
    let Setup {
        cfg,
        labels,
        mut padding,
        mut head,
        train_head,
        shuffle_rng: mut shuffle,
        crop_rng: mut crops,
        ..
    } = setup(target, cfg, model.backbone.embedding_dim())?;
    let fbank = &model.fbank;
    let cache = FeatureCache::build(fbank, target)?;
    let crop_len = cfg.crop_samples();
    let seg = padding.segment_len();

    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        adam.learning_rate = cfg.lr_at(epoch);
        let mut total = 0.0;
        for (step, batch) in batches(target.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            for &i in &batch {
                tape.clear();
                let w = padding.bind(&mut tape);
                let (window, crop) = window_and_crop(
                    &mut tape,
                    w,
                    &padding,
                    target[i].samples.len(),
                    crop_len,
                    seg,
                    fbank,
                    &mut crops,
                )?;
                let feats =
                    crop_features(&mut tape, fbank, cache.get(i), &target[i].samples, crop, window)?;
                let bw = model.backbone.bind(&mut tape)?;
                let emb = model.backbone.forward(&mut tape, &bw, feats)?;
                let hw = head.bind(&mut tape, train_head)?;
                let logits = classify(&mut tape, hw, emb)?;
                let loss = aam_loss(&mut tape, logits, labels[i], &cfg.aam)?;
                let value = tape.scalar(loss);
                check_finite("adapt_vanilla", epoch, step, value)?;
                total += value;
                if tape.requires_grad(loss) {
                    let grads = tape.backward(loss)?;
                    grads.accumulate_into(w, padding.tensor_mut())?;
                    if train_head {
                        head.params_mut().accumulate(&grads, &[hw])?;
                    }
                }
            }
            apply_step(&mut adam, &mut padding, &mut head, train_head, batch.len())?;
        }
        log.push(EpochStats {
            epoch,
            mean_loss: total / target.len() as f64,
            lr: adam.learning_rate,
            mean_distill_loss: None,
        });
    }
    if model.backbone.params().fingerprint() != before {
        return Err(Error::invalid("adapt_vanilla", "backbone parameters changed during adaptation"));
    }
    Ok(Adaptation {
        padding,
        head,
        estimator: None,
        log,
    })
}

fn apply_step(
    adam: &mut AdamState,
    padding: &mut PaddingParams,
    head: &mut ClassifierHead,
    train_head: bool,
    batch_len: usize,
) -> Result<()> {
    let scale = 1.0 / batch_len as f64;
    let mut params = step_params(padding, head, train_head);
    for p in params.iter_mut() {
        if p.grad().is_none() {
            p.accumulate_grad(&vec![0.0; p.len()])?;
        }
        p.scale_grad(scale);
    }
    adam.step(&mut params)?;
    params.into_iter().for_each(|p| p.zero_grad());
    Ok(())
}

/// Picks this step's padding window and crop. The crop start is aligned for
/// the feature cache given the window's left half.
#[allow(clippy::too_many_arguments)]
fn window_and_crop(
    tape: &mut Tape,
    w: crate::autograd::Var,
    padding: &PaddingParams,
    num_samples: usize,
    crop_len: usize,
    seg: usize,
    fbank: &Fbank,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<crate::autograd::Var>, super::Crop)> {
    let window = if seg == 0 {
        None
    } else {
        let offset = train_offset(padding, rng);
        Some(tape.slice(w, 0, offset, seg)?)
    };
    let crop = draw_crop(num_samples, crop_len, seg / 2, fbank.shift(), rng);
    Ok((window, crop))
}

/// Black-box adaptation. The pretrained model is reachable only through
/// `black_box` (plain samples in, embedding out). A parallel estimator `G`
/// is distilled towards it on padded inputs, and the padding is trained
/// through `G` with the margin loss; the head is trained on the black box's
/// own embeddings.
pub fn adapt_grad_est(
    black_box: &dyn BlackBoxEmbedder,
    fbank: &Fbank,
    target: &[Utterance],
    cfg: &ExperimentConfig,
) -> Result<Adaptation> {
    let dim = black_box.embedding_dim();
    let Setup {
        cfg,
        labels,
        mut padding,
        mut head,
        train_head,
        mut init_rng,
        shuffle_rng: mut shuffle,
        crop_rng: mut crops,
    } = setup(target, cfg, dim)?;
    let cache = FeatureCache::build(fbank, target)?;
    // G only exists to route gradients to the padding; without padding it has nothing to do
    let mut estimator = if padding.total_len() > 0 {
        let mut g = Estimator::new(cfg.estimator.clone(), fbank.num_mels(), dim, &mut init_rng)?;
        g.set_norm(FeatureNorm::fit(fbank.num_mels(), cache.iter_data()));
        Some(g)
    } else {
        None
    };
    let crop_len = cfg.crop_samples();
    let seg = padding.segment_len();

    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut adam_g = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        adam.learning_rate = cfg.lr_at(epoch);
        adam_g.learning_rate = cfg.lr_at(epoch);
        let (mut total, mut total_distill) = (0.0, 0.0);
        for (step, batch) in batches(target.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            for &i in &batch {
                tape.clear();
                let w = padding.bind(&mut tape);
                let (window, crop) = window_and_crop(
                    &mut tape,
                    w,
                    &padding,
                    target[i].samples.len(),
                    crop_len,
                    seg,
                    fbank,
                    &mut crops,
                )?;
                let feats =
                    crop_features(&mut tape, fbank, cache.get(i), &target[i].samples, crop, window)?;

                // forward-only query of the black box on the same padded input
                let padded: Vec<f64> = match window {
                    Some(win) => crate::reprogram::pad_samples(
                        &target[i].samples[crop.start..crop.start + crop.len],
                        tape.value(win),
                    ),
                    None => target[i].samples[crop.start..crop.start + crop.len].to_vec(),
                };
                let f_emb = tape.vector(black_box.embed(&padded)?);

                // (c) the head learns from the black box's own embedding
                let hw = head.bind(&mut tape, train_head)?;
                let logits_f = classify(&mut tape, hw, f_emb)?;
                let head_loss = aam_loss(&mut tape, logits_f, labels[i], &cfg.aam)?;
                let value = tape.scalar(head_loss);
                total += value;

                let Some(estimator) = estimator.as_mut() else {
                    check_finite("adapt_grad_est", epoch, step, value)?;
                    if train_head {
                        let grads = tape.backward(head_loss)?;
                        head.params_mut().accumulate(&grads, &[hw])?;
                    }
                    continue;
                };

                // (a) distillation trains G on detached features
                let g_train = estimator.bind(&mut tape, true)?;
                let detached = tape.detach(feats);
                let g_out = estimator.forward(&mut tape, &g_train, detached)?;
                let diff = tape.sub(g_out, f_emb)?;
                let sq = tape.pow(diff, 2.0);
                let distill = tape.sum(sq);

                // (b) margin loss through a frozen copy of G gives the padding its gradient
                let hw_fixed = head.bind(&mut tape, false)?;
                let g_fixed = estimator.bind(&mut tape, false)?;
                let g_pad = estimator.forward(&mut tape, &g_fixed, feats)?;
                let logits_g = classify(&mut tape, hw_fixed, g_pad)?;
                let pad_loss = aam_loss(&mut tape, logits_g, labels[i], &cfg.aam)?;

                let dvalue = tape.scalar(distill);
                check_finite("adapt_grad_est", epoch, step, value + dvalue + tape.scalar(pad_loss))?;
                total_distill += dvalue;

                let sum = tape.add(distill, pad_loss)?;
                let sum = tape.add(sum, head_loss)?;
                let grads = tape.backward(sum)?;
                grads.accumulate_into(w, padding.tensor_mut())?;
                if train_head {
                    head.params_mut().accumulate(&grads, &[hw])?;
                }
                estimator.params_mut().accumulate(&grads, &g_train)?;
            }
            apply_step(&mut adam, &mut padding, &mut head, train_head, batch.len())?;
            if let Some(estimator) = estimator.as_mut() {
                estimator.params_mut().scale_grads(1.0 / batch.len() as f64);
                let mut gp = estimator.params_mut().tensors_mut();
                adam_g.step(&mut gp)?;
                gp.into_iter().for_each(|p| p.zero_grad());
            }
        }
        log.push(EpochStats {
            epoch,
            mean_loss: total / target.len() as f64,
            lr: adam.learning_rate,
            mean_distill_loss: estimator.is_some().then(|| total_distill / target.len() as f64),
        });
    }
    Ok(Adaptation {
        padding,
        head,
        estimator,
        log,
    })
}
