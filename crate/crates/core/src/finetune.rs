//! Parameter-selection strategies, AdamW, and the training loop.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{Packed, ParameterRegistry, Seq2SeqModel, TaggedPair, Weights};
use crate::tensor::{Tape, Tensor};

/// Which parameters a finetuning run may update. Every strategy leaves
/// parameters whose name contains `embed` frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum FinetuneStrategy {
    Full,
    EncoderOnly,
    /// Layer norms, encoder self-attention and decoder cross-attention.
    Lna,
    /// Query and key projections of encoder self-attention and decoder cross-attention.
    QueryKey,
    /// Union of glob patterns over parameter names.
    Custom {
        patterns: Vec<String>,
    },
}

impl FinetuneStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::EncoderOnly => "encoder_only",
            Self::Lna => "lna",
            Self::QueryKey => "query_key",
            Self::Custom { .. } => "custom",
        }
    }
}

fn has_segment(name: &str, seg: &str) -> bool {
    name.split('.').any(|s| s == seg)
}

fn builtin_selects(strategy: &FinetuneStrategy, name: &str) -> bool {
    let encoder = name.starts_with("encoder.");
    let decoder = name.starts_with("decoder.");
    let qk = has_segment(name, "q_proj") || has_segment(name, "k_proj");
    match strategy {
        FinetuneStrategy::Full => true,
        FinetuneStrategy::EncoderOnly => encoder,
        FinetuneStrategy::Lna => {
            name.contains("layernorm")
                || (encoder && has_segment(name, "self_attn"))
                || (decoder && has_segment(name, "cross_attn"))
        }
        FinetuneStrategy::QueryKey => {
            qk && ((encoder && has_segment(name, "self_attn"))
                || (decoder && has_segment(name, "cross_attn")))
        }
        FinetuneStrategy::Custom { .. } => unreachable!(),
    }
}

/// Names selected by `strategy`, in registry order.
pub fn build_mask(
    strategy: &FinetuneStrategy,
    registry: &ParameterRegistry,
) -> Result<BTreeSet<String>> {
    let candidates = registry.names().iter().filter(|n| !n.contains("embed"));
    match strategy {
        FinetuneStrategy::Custom { patterns } => {
            ensure!(
                !patterns.is_empty(),
                Config,
                "custom strategy needs at least one pattern"
            );
            let mut out = BTreeSet::new();
            for p in patterns {
                let pat = glob::Pattern::new(p)
                    .map_err(|e| Error::Config(format!("bad pattern {p:?}: {e}")))?;
                let hits: Vec<&String> = registry
                    .names()
                    .iter()
                    .filter(|n| !n.contains("embed") && pat.matches(n))
                    .collect();
                ensure!(
                    !hits.is_empty(),
                    Config,
                    "pattern {p:?} matches no trainable parameter"
                );
                out.extend(hits.into_iter().cloned());
            }
            Ok(out)
        }
        s => Ok(candidates
            .filter(|n| builtin_selects(s, n))
            .cloned()
            .collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    /// Steps between dev evaluations; `None` means once per pass over the training data.
    pub eval_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 2e-5,
            lr_end: 5e-9,
            max_steps: 1000,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            early_stop_patience: 3,
            eval_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr_end > 0.0 && self.lr_start >= self.lr_end,
            Config,
            "learning rates need lr_start >= lr_end > 0 (got {} and {})",
            self.lr_start,
            self.lr_end
        );
        ensure!(
            self.batch_size >= 1,
            Config,
            "batch_size must be at least 1"
        );
        ensure!(
            self.early_stop_patience >= 1,
            Config,
            "early_stop_patience must be at least 1"
        );
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            Config,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, Config, "adam_eps must be positive");
        ensure!(
            self.weight_decay >= 0.0,
            Config,
            "weight_decay must be nonnegative"
        );
        ensure!(
            self.eval_every != Some(0),
            Config,
            "eval_every must be positive"
        );
        Ok(())
    }

    /// Linear interpolation from `lr_start` (step 0) to `lr_end` (step `max_steps`).
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step >= self.max_steps {
            return if self.max_steps == 0 {
                self.lr_start
            } else {
                self.lr_end
            };
        }
        let frac = step as f64 / self.max_steps as f64;
        self.lr_start + (self.lr_end - self.lr_start) * frac
    }
}

/// First and second moments for the selected parameters only.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    slots: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(registry: &ParameterRegistry, mask: &BTreeSet<String>) -> Self {
        let slots = registry
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| mask.contains(*n))
            .map(|(i, _)| {
                let n = registry.by_index(i).data.len();
                (i, vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Self { slots }
    }

    /// Registry positions that carry optimizer state.
    pub fn indices(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.0).collect()
    }
}

/// One bias-corrected AdamW update. `grads[i]` belongs to the `i`-th masked
/// parameter; `step` is 1-based and selects the learning rate.
pub fn adam_step(
    params: &mut ParameterRegistry,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    step: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    ensure!(step >= 1, Contract, "Adam steps are numbered from 1");
    ensure!(
        grads.len() == state.slots.len(),
        Contract,
        "{} gradients for {} optimized parameters",
        grads.len(),
        state.slots.len()
    );
    for ((idx, _, _), g) in state.slots.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: params.names()[*idx].clone(),
                step,
            });
        }
    }
    let lr = cfg.learning_rate(step);
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for ((idx, m, v), g) in state.slots.iter_mut().zip(grads) {
        let p = params.by_index_mut(*idx);
        for i in 0..p.data.len() {
            let gi = g[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mut theta = p.data[i] as f64;
            theta -= lr * cfg.weight_decay * theta;
            theta -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            p.data[i] = theta as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub classifier_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trainable: Vec<String>,
    pub history: Vec<HistoryRecord>,
    pub steps_run: usize,
    /// Step of the returned parameters; 0 means the initial model was never beaten.
    pub best_step: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
}

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Extra per-step objective sharing the encoder output of the training batch.
pub trait AuxObjective {
    /// Adds a term to the step loss. `params` are the objective's own leaves,
    /// whose gradients are handed back through [`AuxObjective::update`].
    fn build<'t>(
        &mut self,
        tape: &'t Tape<f32>,
        memory: &Packed<'t, f32>,
        batch: &[TaggedPair],
    ) -> Result<AuxTerm<'t>>;

    fn update(&mut self, grads: &[Vec<f32>], step: usize, cfg: &TrainConfig) -> Result<()>;

    /// `(classifier_acc, adv_loss)` on the dev set.
    fn evaluate(&self, model: &Seq2SeqModel, dev: &[TaggedPair]) -> Result<(f64, f64)>;
}

pub struct AuxTerm<'t> {
    pub loss: Option<Tensor<'t, f32>>,
    pub params: Vec<Tensor<'t, f32>>,
}

/// Mean token loss over `data`, evaluated in chunks.
pub fn dataset_loss(model: &Seq2SeqModel, data: &[TaggedPair], chunk: usize) -> Result<f64> {
    ensure!(!data.is_empty(), Input, "empty evaluation set");
    let mut total = 0.0;
    let mut tokens = 0usize;
    for c in data.chunks(chunk.max(1)) {
        let n: usize = c.iter().map(|p| p.tgt_out.len()).sum();
        total += model.seq2seq_loss(c)? as f64 * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Trains the masked parameters of `model` in place and leaves it at the best
/// dev-loss checkpoint.
pub fn train(
    model: &mut Seq2SeqModel,
    train_data: &[TaggedPair],
    dev_data: &[TaggedPair],
    strategy: &FinetuneStrategy,
    cfg: &TrainConfig,
    aux: Option<&mut dyn AuxObjective>,
) -> Result<TrainReport> {
    let mask = build_mask(strategy, &model.params)?;
    train_with_mask(model, train_data, dev_data, mask, cfg, aux)
}

/// [`train`] over an explicit set of trainable parameter names. Unlike the
/// finetuning strategies, the set may include embeddings.
pub fn train_with_mask(
    model: &mut Seq2SeqModel,
    train_data: &[TaggedPair],
    dev_data: &[TaggedPair],
    mask: BTreeSet<String>,
    cfg: &TrainConfig,
    mut aux: Option<&mut dyn AuxObjective>,
) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(!train_data.is_empty(), Input, "empty training data");
    ensure!(!dev_data.is_empty(), Input, "empty dev data");
    for name in &mask {
        ensure!(
            model.params.get(name).is_some(),
            Input,
            "unknown trainable parameter `{name}`"
        );
    }
    let mut state = AdamState::new(&model.params, &mask);
    let slots = state.indices();
    let eval_every = cfg
        .eval_every
        .unwrap_or_else(|| train_data.len().div_ceil(cfg.batch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd509_0a7e);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut best_params = model.params.clone();
    let mut best_dev = dataset_loss(model, dev_data, cfg.batch_size.max(32))?;
    let mut best_step = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut window = (0.0, 0usize);
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_data[order[cursor]].clone());
            cursor += 1;
        }

        let (loss_value, grads, aux_grads) = {
            let tape = Tape::<f32>::new();
            let w = Weights::bind(&model.params, &tape, |n| mask.contains(n));
            let drop = (model.config.dropout_rate > 0.0).then_some(&mut dropout_rng);
            let (loss, memory) = model.forward().seq2seq_loss(&w, &batch, drop)?;
            let loss_value = loss.item() as f64;
            let mut total = loss;
            let mut aux_params = Vec::new();
            if let Some(a) = aux.as_deref_mut() {
                let term = a.build(&tape, &memory, &batch)?;
                if let Some(l) = term.loss {
                    total = total.add(l)?;
                }
                aux_params = term.params;
            }
            tape.backward(total)?;
            let grads: Vec<Vec<f32>> = slots
                .iter()
                .map(|&i| {
                    let t = w.tensors()[i];
                    t.grad().unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect();
            let aux_grads: Vec<Vec<f32>> = aux_params
                .iter()
                .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect();
            (loss_value, grads, aux_grads)
        };
        adam_step(&mut model.params, &grads, &mut state, step, cfg)?;
        if let Some(a) = aux.as_deref_mut() {
            a.update(&aux_grads, step, cfg)?;
        }
        window.0 += loss_value;
        window.1 += 1;
        steps_run = step;

        if step % eval_every == 0 || step == cfg.max_steps {
            let dev_loss = dataset_loss(model, dev_data, cfg.batch_size.max(32))?;
            let (classifier_acc, adv_loss) = match aux.as_deref() {
                Some(a) => {
                    let (c, l) = a.evaluate(model, dev_data)?;
                    (Some(c), Some(l))
                }
                None => (None, None),
            };
            history.push(HistoryRecord {
                step,
                train_loss: window.0 / window.1 as f64,
                dev_loss,
                lr: cfg.learning_rate(step),
                classifier_acc,
                adv_loss,
            });
            log::debug!(
                "step {step}: train {:.4} dev {dev_loss:.4}",
                window.0 / window.1 as f64
            );
            window = (0.0, 0);
            if dev_loss < best_dev {
                best_dev = dev_loss;
                best_step = step;
                best_params = model.params.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    stopped_early = step < cfg.max_steps;
                    break;
                }
            }
        }
    }
    model.params = best_params;
    Ok(TrainReport {
        trainable: mask.into_iter().collect(),
        history,
        steps_run,
        best_step,
        best_dev_loss: best_dev,
        stopped_early,
    })
}

pub struct TwoStepReport {
    pub translation: TrainReport,
    pub summarization: TrainReport,
}

/// Full finetuning on translation pairs, then query-key finetuning on summarization.
pub fn two_step_finetune(
    model: &mut Seq2SeqModel,
    translation: (&[TaggedPair], &[TaggedPair]),
    summarization: (&[TaggedPair], &[TaggedPair]),
    translation_cfg: &TrainConfig,
    summarization_cfg: &TrainConfig,
) -> Result<TwoStepReport> {
    ensure!(!translation.0.is_empty(), Input, "empty translation data");
    ensure!(
        !summarization.0.is_empty(),
        Input,
        "empty summarization data"
    );
    let t = train(
        model,
        translation.0,
        translation.1,
        &FinetuneStrategy::Full,
        translation_cfg,
        None,
    )?;
    let s = train(
        model,
        summarization.0,
        summarization.1,
        &FinetuneStrategy::QueryKey,
        summarization_cfg,
        None,
    )?;
    Ok(TwoStepReport {
        translation: t,
        summarization: s,
    })
}
