//! The "paper-trends" recipe and a runner that shares pretraining between
//! conditions of the same seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use lzlab_core::adversarial::{AdvConfig, AdvMode};
use lzlab_core::finetune::FinetuneStrategy;
use lzlab_core::Result;

use crate::config::{Direction, ExperimentConfig};
use crate::data::ExperimentData;
use crate::manifest::RunManifest;
use crate::run::{pretrain, run, save_pretrained, Pretrained};

pub const PAPER_TRENDS: &str = "paper-trends";

/// Adversarial loss weight used by the recipe.
pub const RECIPE_ADV_WEIGHT: f64 = 3.0;

/// Held-out language of the multilingual conditions and the single
/// finetuning language of the monolingual ones.
pub const HELD_OUT: usize = 3;
pub const MONO_LANGUAGE: usize = 0;

fn named(
    base: &ExperimentConfig,
    name: &str,
    edit: impl FnOnce(&mut ExperimentConfig),
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: name.into(),
        ..base.clone()
    };
    edit(&mut cfg);
    cfg
}

fn adversary(mode: AdvMode) -> AdvConfig {
    AdvConfig {
        mode,
        adv_weight: RECIPE_ADV_WEIGHT,
        ..AdvConfig::default()
    }
}

/// Multilingual conditions train on every language but [`HELD_OUT`] and are
/// evaluated on all zero-shot directions. Monolingual conditions train on
/// [`MONO_LANGUAGE`] only and are evaluated on the other intralingual
/// directions; `mono_supervised` also trains on the held-out one.
pub fn paper_trends(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let n = base.corpus.family.n_languages;
    let multi_langs: Vec<usize> = (0..n).filter(|&l| l != HELD_OUT).collect();
    let multi_eval: Vec<Direction> = Direction::all(n)
        .into_iter()
        .filter(|d| !(d.0 == d.1 && multi_langs.contains(&d.0)))
        .collect();
    let multi = ExperimentConfig {
        train_languages: multi_langs,
        eval_directions: multi_eval,
        strategy: FinetuneStrategy::Full,
        adversary: AdvConfig::default(),
        residual_drop: false,
        two_step: false,
        supervised: false,
        ..base.clone()
    };
    // As many finetuning examples as the multilingual runs.
    let mut mono_corpus = multi.corpus.clone();
    mono_corpus.train_docs *= multi.train_languages.len();
    let mono = ExperimentConfig {
        corpus: mono_corpus,
        train_languages: vec![MONO_LANGUAGE],
        eval_directions: (0..n)
            .filter(|&l| l != MONO_LANGUAGE)
            .map(|l| Direction(l, l))
            .collect(),
        ..multi.clone()
    };
    let mut out = vec![
        named(&multi, "baseline", |_| {}),
        named(&multi, "ce_adversarial", |c| {
            c.adversary = adversary(AdvMode::CrossEntropy)
        }),
        named(&multi, "balanced_adversarial", |c| {
            c.adversary = adversary(AdvMode::Balanced)
        }),
        named(&multi, "balanced_residual_drop", |c| {
            c.adversary = adversary(AdvMode::Balanced);
            c.residual_drop = true;
        }),
        named(&multi, "two_step_query_key", |c| {
            c.two_step = true;
            c.strategy = FinetuneStrategy::QueryKey;
        }),
        named(&multi, "query_key", |c| {
            c.strategy = FinetuneStrategy::QueryKey
        }),
    ];
    for strategy in [
        FinetuneStrategy::Full,
        FinetuneStrategy::EncoderOnly,
        FinetuneStrategy::Lna,
        FinetuneStrategy::QueryKey,
    ] {
        let name = format!("mono_{}", strategy.label());
        out.push(named(&mono, &name, |c| c.strategy = strategy));
    }
    out.push(named(&mono, "mono_supervised", |c| {
        c.supervised = true;
        c.eval_directions = vec![Direction(HELD_OUT, HELD_OUT)];
    }));
    out
}

pub fn recipe(name: &str, base: &ExperimentConfig) -> Option<Vec<ExperimentConfig>> {
    (name == PAPER_TRENDS).then(|| paper_trends(base))
}

/// Runs conditions, pretraining once per distinct
/// [`ExperimentConfig::pretrain_hash`].
#[derive(Default)]
pub struct Lab {
    out: Option<PathBuf>,
    cache: HashMap<String, (Pretrained, Option<PathBuf>)>,
}

impl Lab {
    pub fn new(out: Option<PathBuf>) -> Self {
        Self {
            out,
            cache: HashMap::new(),
        }
    }

    /// The pretrained model for `(cfg, seed)` and its checkpoint path.
    pub fn pretrained(
        &mut self,
        cfg: &ExperimentConfig,
        seed: u64,
        data: &ExperimentData,
    ) -> Result<&(Pretrained, Option<PathBuf>)> {
        let key = cfg.pretrain_hash(seed);
        if !self.cache.contains_key(&key) {
            let pre = pretrain(cfg, data)?;
            let path = match &self.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    let p = dir.join(format!("pretrain-{}-s{seed}.lzck", &key[..12]));
                    save_pretrained(&pre, &p)?;
                    Some(p)
                }
                None => None,
            };
            self.cache.insert(key.clone(), (pre, path));
        }
        Ok(&self.cache[&key])
    }

    pub fn run(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<RunManifest> {
        cfg.validate()?;
        let out = self.out.clone();
        let data = ExperimentData::generate(&cfg.corpus, seed)?;
        let (pre, path) = self.pretrained(cfg, seed, &data)?;
        Ok(run(cfg, &data, &pre.model, path.as_deref(), out.as_deref())?.0)
    }

    /// Every configuration over every one of its seeds, seed-major.
    pub fn run_all(&mut self, configs: &[ExperimentConfig]) -> Result<Vec<RunManifest>> {
        let mut seeds: Vec<u64> = configs
            .iter()
            .flat_map(|c| c.seeds.iter().copied())
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = Vec::new();
        for seed in seeds {
            for cfg in configs.iter().filter(|c| c.seeds.contains(&seed)) {
                out.push(self.run(cfg, seed)?);
            }
        }
        Ok(out)
    }

    /// The cached pretraining for `(cfg, seed)`, if it has run.
    pub fn cached(&self, cfg: &ExperimentConfig, seed: u64) -> Option<&Pretrained> {
        self.cache.get(&cfg.pretrain_hash(seed)).map(|(p, _)| p)
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}
