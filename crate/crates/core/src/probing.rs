//! Post-hoc probing: how easily can a fresh linear classifier recover the
//! source language from frozen encoder outputs?

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{ce_classifier_loss, LanguageClassifierHead};
use crate::corpus::Lang;
use crate::error::{ensure, Result};
use crate::finetune::{adam_step, AdamState, TrainConfig};
use crate::model::{Seq2SeqModel, TaggedPair, Weights};
use crate::tensor::Tape;

/// Final encoder states of one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStates {
    /// Row-major `[len × d_model]`.
    pub rows: Vec<f32>,
    pub len: usize,
    pub lang: Lang,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Passes over the probing data.
    pub epochs: usize,
    pub train: TrainConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            train: TrainConfig {
                lr_start: 1e-2,
                lr_end: 1e-3,
                batch_size: 8,
                weight_decay: 0.0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub per_language: BTreeMap<Lang, LanguageAccuracy>,
    /// Token-weighted accuracy over all languages.
    pub accuracy: f64,
    pub n_tokens: usize,
    pub chance: f64,
}

/// Final encoder states for every source sequence of `data`.
pub fn encoder_states(model: &Seq2SeqModel, data: &[TaggedPair]) -> Result<Vec<SequenceStates>> {
    let d = model.config.d_model;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let tape = Tape::<f32>::new();
        let w = Weights::bind(&model.params, &tape, |_| false);
        let srcs: Vec<&[u32]> = chunk.iter().map(|p| p.src.as_slice()).collect();
        let packed = model.forward().encode(&w, &srcs, None)?;
        let hidden = packed.hidden.data();
        for (p, &(start, len)) in chunk.iter().zip(&packed.spans) {
            out.push(SequenceStates {
                rows: hidden[start * d..(start + len) * d].to_vec(),
                len,
                lang: p.src_lang,
            });
        }
    }
    Ok(out)
}

/// Trains a fresh probe on frozen states with the classifier cross-entropy.
pub fn train_probe_on_states(
    states: &[SequenceStates],
    d_model: usize,
    classes: Vec<Lang>,
    cfg: &ProbeConfig,
) -> Result<LanguageClassifierHead> {
    ensure!(!states.is_empty(), Input, "no probing data");
    ensure!(cfg.epochs >= 1, Config, "probe needs at least one epoch");
    let mut head = LanguageClassifierHead::zeros(d_model, classes)?;
    let labels: Vec<usize> = states
        .iter()
        .map(|s| {
            head.class_of(s.lang).ok_or_else(|| {
                crate::Error::Input(format!("language {} is not a probe class", s.lang))
            })
        })
        .collect::<Result<_>>()?;
    let steps_per_epoch = states.len().div_ceil(cfg.train.batch_size);
    let train_cfg = TrainConfig {
        max_steps: steps_per_epoch * cfg.epochs,
        ..cfg.train.clone()
    };
    train_cfg.validate()?;
    let all: BTreeSet<String> = head.params.names().iter().cloned().collect();
    let mut state = AdamState::new(&head.params, &all);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(train_cfg.batch_size) {
            step += 1;
            let mut rows = Vec::new();
            let mut y = Vec::new();
            for &i in batch {
                rows.extend_from_slice(&states[i].rows);
                y.extend(std::iter::repeat_n(labels[i], states[i].len));
            }
            let grads = {
                let tape = Tape::<f32>::new();
                let x = tape.constant(rows, &[y.len(), d_model]);
                let (w, b) = head.bind(&tape, true);
                let loss = ce_classifier_loss(LanguageClassifierHead::classify(x, (w, b))?, &y)?;
                tape.backward(loss)?;
                vec![w.grad().unwrap(), b.grad().unwrap()]
            };
            adam_step(&mut head.params, &grads, &mut state, step, &train_cfg)?;
        }
    }
    Ok(head)
}

/// Trains a probe on the final encoder outputs of `model`, which is only read.
pub fn train_probe(
    model: &Seq2SeqModel,
    data: &[TaggedPair],
    classes: Vec<Lang>,
    cfg: &ProbeConfig,
) -> Result<LanguageClassifierHead> {
    let states = encoder_states(model, data)?;
    train_probe_on_states(&states, model.config.d_model, classes, cfg)
}

pub fn probe_accuracy_on_states(
    probe: &LanguageClassifierHead,
    states: &[SequenceStates],
) -> Result<ProbeReport> {
    ensure!(!states.is_empty(), Input, "empty probing test set");
    let mut per_language: BTreeMap<Lang, LanguageAccuracy> = BTreeMap::new();
    for s in states {
        let truth = probe.class_of(s.lang);
        let probs = probe.predict(&s.rows, s.len)?;
        let correct = probs
            .iter()
            .filter(|row| {
                let pred = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                Some(pred) == truth
            })
            .count();
        let e = per_language.entry(s.lang).or_insert(LanguageAccuracy {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        e.correct += correct;
        e.total += s.len;
    }
    let (mut correct, mut total) = (0, 0);
    for e in per_language.values_mut() {
        e.accuracy = e.correct as f64 / e.total.max(1) as f64;
        correct += e.correct;
        total += e.total;
    }
    Ok(ProbeReport {
        per_language,
        accuracy: correct as f64 / total.max(1) as f64,
        n_tokens: total,
        chance: 1.0 / probe.n_classes() as f64,
    })
}

pub fn probe_accuracy(
    probe: &LanguageClassifierHead,
    model: &Seq2SeqModel,
    test: &[TaggedPair],
) -> Result<ProbeReport> {
    ensure!(!test.is_empty(), Input, "empty probing test set");
    probe_accuracy_on_states(probe, &encoder_states(model, test)?)
}
