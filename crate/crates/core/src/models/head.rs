use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Additive angular margin settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("aam margin must be finite and >= 0"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("aam scale must be finite and > 0"));
        }
        Ok(())
    }
}

/// Cosine classifier: logits are cosines between the embedding and each
/// column of a bias-free `[embedding_dim, num_speakers]` projection.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    params: ParamStore,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(embedding_dim: usize, num_speakers: usize, rng: &mut R) -> Result<Self> {
        if embedding_dim == 0 || num_speakers == 0 {
            return Err(Error::invalid(
                "classifier_head",
                "embedding_dim and num_speakers must be >= 1",
            ));
        }
        let mut params = ParamStore::new();
        params.gaussian(
            rng,
            "projection",
            vec![embedding_dim, num_speakers],
            (1.0 / embedding_dim as f64).sqrt(),
        );
        params.set_trainable(true);
        Ok(ClassifierHead { params })
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.get(0).shape()[0]
    }

    pub fn num_speakers(&self) -> usize {
        self.params.get(0).shape()[1]
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Var> {
        Ok(self.params.bind(tape, trainable)?[0])
    }

    pub(crate) fn from_parts(params: ParamStore) -> Self {
        ClassifierHead { params }
    }
}

/// Cosine logits `[num_speakers]` for a 1-D embedding.
pub fn classify(tape: &mut Tape, projection: Var, embedding: Var) -> Result<Var> {
    let wshape = tape.shape(projection).to_vec();
    let e_len = tape.value(embedding).len();
    if wshape.len() != 2 || wshape[0] != e_len {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: tape.shape(embedding).to_vec(),
            rhs: wshape,
        });
    }
    if tape.value(embedding).iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroNorm("classify: embedding"));
    }
    let (rows, cols) = (wshape[0], wshape[1]);
    let w = tape.value(projection);
    if (0..cols).any(|j| (0..rows).all(|i| w[i * cols + j] == 0.0)) {
        return Err(Error::ZeroNorm("classify: projection column"));
    }

    let e_sq = tape.pow(embedding, 2.0);
    let e_norm = tape.sum(e_sq);
    let e_norm = tape.sqrt(e_norm);
    let e_unit = tape.div(embedding, e_norm)?;
    let e_row = tape.reshape(e_unit, vec![1, rows])?;

    let w_sq = tape.pow(projection, 2.0);
    let col_norms = tape.sum_axis(w_sq, 0)?;
    let col_norms = tape.sqrt(col_norms);
    let w_unit = tape.div(projection, col_norms)?;

    let logits = tape.matmul(e_row, w_unit)?;
    tape.reshape(logits, vec![cols])
}

/// Additive angular margin softmax loss over cosine logits: the target
/// cosine `cos θ` is replaced by `cos(θ + m)`, all logits are multiplied by
/// `s`, and cross-entropy is taken against `label`.
pub fn aam_loss(tape: &mut Tape, cos_logits: Var, label: usize, cfg: &AamConfig) -> Result<Var> {
    let shape = tape.shape(cos_logits).to_vec();
    if shape.len() != 1 {
        return Err(Error::invalid("aam_loss", format!("expected 1-D logits, got {shape:?}")));
    }
    let n = shape[0];
    if label >= n {
        return Err(Error::invalid(
            "aam_loss",
            format!("label {label} out of range for {n} classes"),
        ));
    }
    let target = tape.slice(cos_logits, 0, label, 1)?;
    // cos(θ + m) = cos θ cos m − sin θ sin m, with sin θ = sqrt(1 − cos² θ) for θ ∈ [0, π]
    let c2 = tape.pow(target, 2.0);
    let one_minus = tape.scale(c2, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let one_minus = tape.clamp_min(one_minus, 0.0);
    let sin = tape.sqrt(one_minus);
    let a = tape.scale(target, cfg.margin.cos());
    let b = tape.scale(sin, cfg.margin.sin());
    let shifted = tape.sub(a, b)?;

    let mut parts = Vec::with_capacity(3);
    if label > 0 {
        parts.push(tape.slice(cos_logits, 0, 0, label)?);
    }
    parts.push(shifted);
    if label + 1 < n {
        parts.push(tape.slice(cos_logits, 0, label + 1, n - label - 1)?);
    }
    let logits = tape.concat(&parts, 0)?;
    let logits = tape.scale(logits, cfg.scale);
    tape.softmax_cross_entropy(logits, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check_gradients, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(logits: &[f64], label: usize, cfg: AamConfig) -> f64 {
        let mut t = Tape::new();
        let l = t.vector(logits.to_vec());
        let loss = aam_loss(&mut t, l, label, &cfg).unwrap();
        t.scalar(loss)
    }

    #[test]
    fn worked_example() {
        let cfg = AamConfig::default();
        let got = loss_of(&[0.9, 0.1], 0, cfg);
        let target = (0.9f64.acos() + 0.2).cos();
        let expected = ((30.0 * target).exp() + 3.0f64.exp()).ln() - 30.0 * target;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn zero_margin_unit_scale_is_cross_entropy() {
        let logits = [0.3, -0.2, 0.7, 0.1];
        for label in 0..4 {
            let got = loss_of(&logits, label, AamConfig { margin: 0.0, scale: 1.0 });
            let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
            assert!((got - (lse - logits[label])).abs() < 1e-12);
        }
    }

    #[test]
    fn single_speaker_loss_is_zero() {
        assert_eq!(loss_of(&[0.4], 0, AamConfig::default()), 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let mut t = Tape::new();
        let l = t.vector(vec![0.1, 0.2]);
        assert!(aam_loss(&mut t, l, 2, &AamConfig::default()).is_err());
    }

    #[test]
    fn classify_yields_cosines() {
        let mut t = Tape::new();
        let w = t.constant(vec![2, 3], vec![1.0, 0.0, 3.0, 0.0, 2.0, 4.0]).unwrap();
        let e = t.vector(vec![2.0, 0.0]);
        let logits = classify(&mut t, w, e).unwrap();
        let v = t.value(logits);
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!(v[1].abs() < 1e-15);
        assert!((v[2] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn classify_rejects_zero_vectors() {
        let mut t = Tape::new();
        let w = t.constant(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let e = t.vector(vec![1.0, 1.0]);
        assert!(matches!(classify(&mut t, w, e), Err(Error::ZeroNorm(_))));
        let w = t.constant(vec![2, 2], vec![1.0, 2.0, 1.0, 3.0]).unwrap();
        let z = t.vector(vec![0.0, 0.0]);
        assert!(matches!(classify(&mut t, w, z), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn head_and_loss_gradients() {
        let head = ClassifierHead::new(6, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let point = Tensor::from_vec(vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.2]);
        let err = check_gradients(
            |t, x| {
                let w = head.bind(t, false)?;
                let logits = classify(t, w, x)?;
                aam_loss(t, logits, 2, &AamConfig::default())
            },
            &point,
            1e-5,
            &[],
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn margin_never_lowers_loss(
            others in prop::collection::vec(-1.0f64..1.0, 1..6),
            margin in 0.01f64..0.5,
            scale in 1.0f64..40.0,
            u in 0.0f64..1.0,
        ) {
            // target cosine drawn from (-cos m, 1)
            let lo = -margin.cos();
            let target = lo + (1.0 - lo) * (0.001 + 0.998 * u);
            let mut logits = vec![target];
            logits.extend(others);
            let plain = loss_of(&logits, 0, AamConfig { margin: 0.0, scale });
            let with_margin = loss_of(&logits, 0, AamConfig { margin, scale });
            prop_assert!(with_margin >= plain, "{with_margin} < {plain}");
            // strictness is only observable while the loss is above f64 resolution
            if plain > 1e-9 {
                prop_assert!(with_margin > plain, "{with_margin} <= {plain}");
            }
        }
    }
}
