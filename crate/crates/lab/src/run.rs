//! One experiment run: pretrain, finetune, decode, evaluate, probe.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use lzlab_core::adversarial::{train_with_adversary, AdvMode, LanguageClassifierHead};
use lzlab_core::corpus::Lang;
use lzlab_core::eval::{language_accuracy, EvalReport, Generator, ModelGenerator};
use lzlab_core::finetune::{
    train, train_with_mask, two_step_finetune, write_history, TrainConfig, TrainReport,
};
use lzlab_core::model::{EmbeddingInit, Seq2SeqModel, TaggedPair};
use lzlab_core::probing::{probe_accuracy, train_probe, ProbeConfig, ProbeReport};
use lzlab_core::Result;

use crate::config::{Direction, ExperimentConfig};
use crate::data::{streams, sub_seed, ExperimentData};
use crate::manifest::{RunManifest, TrainSummary};

/// Token embeddings keep their structured initialization during pretraining.
const FROZEN_IN_PRETRAINING: &str = "encoder.embed_tokens.weight";

/// Dev pairs used for the pretraining smoke check.
const SMOKE_EXAMPLES: usize = 40;

fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: sub_seed(seed, streams::OPTIMIZER),
        ..cfg.clone()
    }
}

pub struct Pretrained {
    pub model: Seq2SeqModel,
    pub report: TrainReport,
    /// Share of denoised dev outputs in the input language.
    pub smoke_lang_acc: f64,
    pub wall_clock_seconds: f64,
}

/// Denoising pretraining over every language. All parameters train except
/// the token embeddings.
pub fn pretrain(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Pretrained> {
    let start = Instant::now();
    let family = &cfg.corpus.family;
    let mut model = Seq2SeqModel::new(
        cfg.model.model_config(family, false),
        &EmbeddingInit::Structured(family.clone()),
        sub_seed(data.seed, streams::INIT),
    )?;
    let train_pairs = data.denoising(&data.pretrain, streams::MASKING)?;
    let dev_pairs = data.denoising(&data.dev, streams::MASKING)?;
    let mask: BTreeSet<String> = model
        .params
        .names()
        .iter()
        .filter(|n| *n != FROZEN_IN_PRETRAINING)
        .cloned()
        .collect();
    let report = train_with_mask(
        &mut model,
        &train_pairs,
        &dev_pairs,
        mask,
        &seeded(&cfg.pretrain, data.seed),
        None,
    )?;
    let smoke_lang_acc = denoising_language_accuracy(cfg, &model, &dev_pairs)?;
    log::info!(
        "pretrained seed {}: dev loss {:.3}, smoke language accuracy {:.2}",
        data.seed,
        report.best_dev_loss,
        smoke_lang_acc
    );
    Ok(Pretrained {
        model,
        report,
        smoke_lang_acc,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Greedy denoising of an evenly spread dev sample; an output counts when
/// it is in the input language.
pub fn denoising_language_accuracy(
    cfg: &ExperimentConfig,
    model: &Seq2SeqModel,
    dev: &[TaggedPair],
) -> Result<f64> {
    let family = &cfg.corpus.family;
    let stride = (dev.len() / SMOKE_EXAMPLES).max(1);
    let sample: Vec<&TaggedPair> = dev.iter().step_by(stride).take(SMOKE_EXAMPLES).collect();
    let mut outputs = Vec::with_capacity(sample.len());
    for p in &sample {
        outputs.push(
            model
                .greedy_decode(&p.src, family.eos(), p.tgt_out.len() + 4)?
                .tokens,
        );
    }
    let langs: Vec<Lang> = sample.iter().map(|p| p.src_lang).collect();
    Ok(language_accuracy(family, &outputs, &langs)?.accuracy)
}

pub struct Finetuned {
    pub model: Seq2SeqModel,
    /// Reports per stage, in order.
    pub stages: Vec<(&'static str, TrainReport)>,
}

impl Finetuned {
    pub fn summaries(&self) -> Vec<TrainSummary> {
        self.stages
            .iter()
            .map(|(s, r)| TrainSummary::new(s, r))
            .collect()
    }

    /// Parameters updated by the last stage.
    pub fn trainable(&self) -> Vec<String> {
        self.stages
            .last()
            .map(|(_, r)| r.trainable.clone())
            .unwrap_or_default()
    }
}

/// Finetunes a copy of `base` as configured: plain, adversarial, or two-step.
pub fn finetune(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    base: &Seq2SeqModel,
) -> Result<Finetuned> {
    let mut model = Seq2SeqModel {
        config: cfg.model_config(),
        params: base.params.clone(),
    };
    let dirs = cfg.supervised_directions();
    let train_pairs = data.pairs(&data.train, &dirs)?;
    let dev_pairs = data.pairs(&data.dev, &dirs)?;
    let train_cfg = seeded(&cfg.train, data.seed);
    let stages = if cfg.two_step {
        let trans_train = data.translation_pairs(&data.translation)?;
        let trans_dev = data.translation_pairs(&data.dev)?;
        let r = two_step_finetune(
            &mut model,
            (&trans_train, &trans_dev),
            (&train_pairs, &dev_pairs),
            &seeded(cfg.translation_config(), data.seed),
            &train_cfg,
        )?;
        vec![
            ("translation", r.translation),
            ("summarization", r.summarization),
        ]
    } else if cfg.adversary.mode != AdvMode::None {
        let classes: BTreeSet<Lang> = train_pairs.iter().map(|p| p.src_lang).collect();
        let head =
            LanguageClassifierHead::zeros(model.config.d_model, classes.into_iter().collect())?;
        let (r, _) = train_with_adversary(
            &mut model,
            head,
            &train_pairs,
            &dev_pairs,
            &cfg.strategy,
            &train_cfg,
            &cfg.adversary,
        )?;
        vec![("summarization", r)]
    } else {
        let r = train(
            &mut model,
            &train_pairs,
            &dev_pairs,
            &cfg.strategy,
            &train_cfg,
            None,
        )?;
        vec![("summarization", r)]
    };
    Ok(Finetuned { model, stages })
}

/// Beam-decodes the test split in each direction and scores it.
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    model: &Seq2SeqModel,
    directions: &[Direction],
) -> Result<BTreeMap<String, EvalReport>> {
    let family = &cfg.corpus.family;
    let mut out = BTreeMap::new();
    for &d in directions {
        let examples = data.test.summarization(d.0, d.1)?;
        let generator = ModelGenerator {
            model,
            family,
            decode: cfg.decode.for_direction(d),
        };
        let hyps = examples
            .iter()
            .map(|e| generator.generate(&e.src, d.0, d.1))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = examples.iter().map(|e| e.tgt.clone()).collect();
        let bootstrap = cfg.bootstrap.map(|b| lzlab_core::eval::BootstrapConfig {
            seed: sub_seed(data.seed, streams::BOOTSTRAP) ^ b.seed,
            ..b
        });
        let report = EvalReport::compute(family, &hyps, &refs, &vec![d.1; hyps.len()], bootstrap)?;
        out.insert(d.to_string(), report);
    }
    Ok(out)
}

/// Fresh probe over the finetuning languages, trained on the training split
/// and scored on the test split. `None` with fewer than two languages.
pub fn probe(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    model: &Seq2SeqModel,
) -> Result<Option<ProbeReport>> {
    let langs: BTreeSet<Lang> = cfg.train_languages.iter().copied().collect();
    if langs.len() < 2 {
        return Ok(None);
    }
    let dirs: Vec<Direction> = langs.iter().map(|&l| Direction(l, l)).collect();
    let probe_cfg = ProbeConfig {
        train: TrainConfig {
            seed: sub_seed(data.seed, streams::PROBE),
            ..cfg.probe.train.clone()
        },
        ..cfg.probe.clone()
    };
    let head = train_probe(
        model,
        &data.pairs(&data.train, &dirs)?,
        langs.into_iter().collect(),
        &probe_cfg,
    )?;
    Ok(Some(probe_accuracy(
        &head,
        model,
        &data.pairs(&data.test, &dirs)?,
    )?))
}

/// Finetunes, evaluates and probes one condition. With `out`, writes the
/// finetuned checkpoint, training history and manifest there.
pub fn run(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    base: &Seq2SeqModel,
    base_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<(RunManifest, Seq2SeqModel)> {
    let start = Instant::now();
    let seed = data.seed;
    log::info!("run {} seed {seed}", cfg.name);
    let tuned = finetune(cfg, data, base)?;
    let evaluations = evaluate(cfg, data, &tuned.model, &cfg.eval_directions)?;
    let supervised: Vec<Direction> = cfg
        .train_languages
        .iter()
        .map(|&l| Direction(l, l))
        .filter(|d| !cfg.eval_directions.contains(d))
        .collect();
    let supervised_evaluations = evaluate(cfg, data, &tuned.model, &supervised)?;
    let probe = probe(cfg, data, &tuned.model)?;
    let mut checkpoints = BTreeMap::new();
    if let Some(p) = base_path {
        checkpoints.insert("base".to_string(), p.to_path_buf());
    }
    let stem = format!("{}-s{seed}", cfg.name);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{stem}.lzck"));
        tuned.model.save(&path)?;
        checkpoints.insert("finetuned".to_string(), path);
        for (stage, r) in &tuned.stages {
            write_history(
                dir.join(format!("{stem}.{stage}.history.jsonl")),
                &r.history,
            )?;
        }
    }
    let manifest = RunManifest {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed,
        train_languages: cfg.train_languages.clone(),
        checkpoints,
        trainable: tuned.trainable(),
        training: tuned.summaries(),
        evaluations,
        supervised_evaluations,
        probe,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        manifest.save(dir.join(format!("{stem}.manifest.json")))?;
    }
    Ok((manifest, tuned.model))
}

/// Writes a pretraining history next to its checkpoint.
pub fn save_pretrained(p: &Pretrained, checkpoint: &Path) -> Result<()> {
    p.model.save(checkpoint)?;
    write_history(
        checkpoint.with_extension("history.jsonl"),
        &p.report.history,
    )
}
