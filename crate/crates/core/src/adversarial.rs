//! Token-level language classifier on encoder outputs and the adversarial
//! objectives that push encoder states towards language independence.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Lang;
use crate::error::{ensure, Result};
use crate::finetune::{
    adam_step, train, AdamState, AuxObjective, AuxTerm, FinetuneStrategy, TrainConfig, TrainReport,
};
use crate::model::{Packed, ParameterRegistry, Seq2SeqModel, TaggedPair, Weights};
use crate::tensor::{GradScale, Scalar, Tape, Tensor};

/// Clamp applied before every logarithm of a probability.
pub const PROB_EPS: f64 = 1e-9;

const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

/// Linear projection plus softmax from `d_model` to one class per language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageClassifierHead {
    /// Language id of each output class.
    pub classes: Vec<Lang>,
    pub params: ParameterRegistry,
}

impl LanguageClassifierHead {
    pub fn zeros(d_model: usize, classes: Vec<Lang>) -> Result<Self> {
        ensure!(
            classes.len() >= 2,
            Config,
            "a language classifier needs at least 2 classes"
        );
        let unique: BTreeSet<&Lang> = classes.iter().collect();
        ensure!(
            unique.len() == classes.len(),
            Config,
            "duplicate language in classifier classes"
        );
        let n = classes.len();
        let params = ParameterRegistry::zeros(&[
            (HEAD_WEIGHT.to_string(), vec![n, d_model]),
            (HEAD_BIAS.to_string(), vec![n]),
        ])?;
        Ok(Self { classes, params })
    }

    pub fn random(d_model: usize, classes: Vec<Lang>, seed: u64) -> Result<Self> {
        let mut head = Self::zeros(d_model, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (d_model as f32).sqrt();
        for v in head.params.get_mut(HEAD_WEIGHT).unwrap().data.iter_mut() {
            *v = rng.gen_range(-a..a);
        }
        Ok(head)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn d_model(&self) -> usize {
        self.params.get(HEAD_WEIGHT).unwrap().shape[1]
    }

    /// Class index of `lang`, if the head knows it.
    pub fn class_of(&self, lang: Lang) -> Option<usize> {
        self.classes.iter().position(|&l| l == lang)
    }

    /// `(weight, bias)` leaves on `tape`.
    pub fn bind<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        trainable: bool,
    ) -> (Tensor<'t, T>, Tensor<'t, T>) {
        let w = Weights::bind(&self.params, tape, |_| trainable);
        (w.get(HEAD_WEIGHT), w.get(HEAD_BIAS))
    }

    /// Per-row distribution over classes for `states` of shape `[rows, d_model]`.
    pub fn classify<'t, T: Scalar>(
        states: Tensor<'t, T>,
        (w, b): (Tensor<'t, T>, Tensor<'t, T>),
    ) -> Result<Tensor<'t, T>> {
        states.linear(w, Some(b))?.softmax(1)
    }

    /// Distributions for plain row-major states.
    pub fn predict(&self, states: &[f32], rows: usize) -> Result<Vec<Vec<f64>>> {
        let d = self.d_model();
        ensure!(
            states.len() == rows * d,
            Contract,
            "states do not have {rows} rows of width {d}"
        );
        let tape = Tape::<f64>::new();
        let x = tape.constant(states.iter().map(|&v| v as f64).collect(), &[rows, d]);
        let p = Self::classify(x, self.bind(&tape, false))?;
        let data = p.to_vec();
        Ok(data.chunks(self.n_classes()).map(<[f64]>::to_vec).collect())
    }
}

/// `−log p_true`, averaged over rows, with `p_true` clamped at [`PROB_EPS`].
pub fn ce_classifier_loss<'t, T: Scalar>(
    probs: Tensor<'t, T>,
    labels: &[usize],
) -> Result<Tensor<'t, T>> {
    probs.prob_nll(labels, T::from_f64(PROB_EPS).unwrap())
}

/// `−log(1 − p_true)`, averaged over rows, with `1 − p_true` clamped at [`PROB_EPS`].
pub fn ce_adversarial_loss<'t, T: Scalar>(
    probs: Tensor<'t, T>,
    labels: &[usize],
) -> Result<Tensor<'t, T>> {
    probs.prob_neg_log_complement(labels, T::from_f64(PROB_EPS).unwrap())
}

/// `KL(P ‖ U) = Σ_c p_c log(p_c N)`, averaged over rows. Ignores labels.
pub fn balanced_adversarial_loss<'t, T: Scalar>(probs: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
    probs.kl_to_uniform()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    None,
    /// Encoder maximizes the classifier's cross-entropy through a gradient reversal layer.
    CrossEntropy,
    /// Encoder minimizes the KL divergence of the classifier output from uniform.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    pub mode: AdvMode,
    pub adv_weight: f64,
    pub grl_scale: GradScale,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            mode: AdvMode::None,
            adv_weight: 1.0,
            grl_scale: GradScale::default(),
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.adv_weight >= 0.0 && self.adv_weight.is_finite(),
            Config,
            "adv_weight must be a finite nonnegative number"
        );
        Ok(())
    }
}

/// Per-row class labels of a packed batch.
fn row_labels(
    head: &LanguageClassifierHead,
    spans: &[(usize, usize)],
    langs: impl Iterator<Item = Lang>,
) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (&(_, len), lang) in spans.iter().zip(langs) {
        let Some(c) = head.class_of(lang) else {
            return Err(crate::Error::Input(format!(
                "language {lang} is not a classifier class"
            )));
        };
        labels.extend(std::iter::repeat_n(c, len));
    }
    Ok(labels)
}

/// Classifier head trained alongside the model with stop-gradient boundaries.
pub struct Adversary {
    pub head: LanguageClassifierHead,
    pub config: AdvConfig,
    state: AdamState,
}

impl Adversary {
    pub fn new(head: LanguageClassifierHead, config: AdvConfig) -> Result<Self> {
        config.validate()?;
        let all: BTreeSet<String> = head.params.names().iter().cloned().collect();
        let state = AdamState::new(&head.params, &all);
        Ok(Self {
            head,
            config,
            state,
        })
    }

    fn encoder_term<'t>(
        &self,
        tape: &'t Tape<f32>,
        hidden: Tensor<'t, f32>,
        labels: &[usize],
    ) -> Result<Option<Tensor<'t, f32>>> {
        if self.config.adv_weight == 0.0 {
            return Ok(None);
        }
        let frozen = self.head.bind(tape, false);
        let term = match self.config.mode {
            AdvMode::None => return Ok(None),
            AdvMode::CrossEntropy => {
                let reversed = hidden.grad_reverse(self.config.grl_scale);
                ce_classifier_loss(LanguageClassifierHead::classify(reversed, frozen)?, labels)?
            }
            AdvMode::Balanced => {
                balanced_adversarial_loss(LanguageClassifierHead::classify(hidden, frozen)?)?
            }
        };
        Ok(Some(term.scale(self.config.adv_weight as f32)))
    }
}

impl AuxObjective for Adversary {
    fn build<'t>(
        &mut self,
        tape: &'t Tape<f32>,
        memory: &Packed<'t, f32>,
        batch: &[TaggedPair],
    ) -> Result<AuxTerm<'t>> {
        let labels = row_labels(&self.head, &memory.spans, batch.iter().map(|p| p.src_lang))?;
        let (w, b) = self.head.bind(tape, true);
        let detached = memory.hidden.detach();
        let head_loss =
            ce_classifier_loss(LanguageClassifierHead::classify(detached, (w, b))?, &labels)?;
        let loss = match self.encoder_term(tape, memory.hidden, &labels)? {
            Some(t) => head_loss.add(t)?,
            None => head_loss,
        };
        Ok(AuxTerm {
            loss: Some(loss),
            params: vec![w, b],
        })
    }

    fn update(&mut self, grads: &[Vec<f32>], step: usize, cfg: &TrainConfig) -> Result<()> {
        adam_step(&mut self.head.params, grads, &mut self.state, step, cfg)
    }

    fn evaluate(&self, model: &Seq2SeqModel, dev: &[TaggedPair]) -> Result<(f64, f64)> {
        let (mut correct, mut rows, mut adv_sum) = (0usize, 0usize, 0.0);
        for chunk in dev.chunks(32) {
            let tape = Tape::<f32>::new();
            let w = Weights::bind(&model.params, &tape, |_| false);
            let srcs: Vec<&[u32]> = chunk.iter().map(|p| p.src.as_slice()).collect();
            let memory = model.forward().encode(&w, &srcs, None)?;
            let labels = row_labels(&self.head, &memory.spans, chunk.iter().map(|p| p.src_lang))?;
            let probs =
                LanguageClassifierHead::classify(memory.hidden, self.head.bind(&tape, false))?;
            let adv = match self.config.mode {
                AdvMode::Balanced => balanced_adversarial_loss(probs)?,
                _ => ce_classifier_loss(probs, &labels)?,
            };
            adv_sum += adv.item() as f64 * labels.len() as f64;
            let data = probs.data();
            let n = self.head.n_classes();
            for (r, &y) in labels.iter().enumerate() {
                let row = &data[r * n..(r + 1) * n];
                let pred = (0..n).fold(0, |best, c| if row[c] > row[best] { c } else { best });
                correct += (pred == y) as usize;
            }
            rows += labels.len();
        }
        ensure!(rows > 0, Input, "empty dev set");
        Ok((correct as f64 / rows as f64, adv_sum / rows as f64))
    }
}

/// Seq2seq training with a simultaneously trained language classifier.
///
/// Per step the loss is `seq2seq + adv_weight · encoder_term + head_loss`,
/// where the head loss sees detached encoder states and the encoder term
/// evaluates a frozen copy of the head.
pub fn train_with_adversary(
    model: &mut Seq2SeqModel,
    head: LanguageClassifierHead,
    train_data: &[TaggedPair],
    dev_data: &[TaggedPair],
    strategy: &FinetuneStrategy,
    cfg: &TrainConfig,
    adv: &AdvConfig,
) -> Result<(TrainReport, LanguageClassifierHead)> {
    ensure!(
        adv.mode != AdvMode::None,
        Config,
        "train_with_adversary needs an adversarial mode"
    );
    ensure!(
        head.d_model() == model.config.d_model,
        Config,
        "classifier width {} differs from d_model {}",
        head.d_model(),
        model.config.d_model
    );
    let mut adversary = Adversary::new(head, adv.clone())?;
    let report = train(
        model,
        train_data,
        dev_data,
        strategy,
        cfg,
        Some(&mut adversary),
    )?;
    Ok((report, adversary.head))
}
