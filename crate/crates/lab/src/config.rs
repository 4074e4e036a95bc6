//! Experiment configuration: a single JSON document, unknown keys rejected.

use std::collections::BTreeSet;
use std::fmt;

use lzlab_core::adversarial::{AdvConfig, AdvMode};
use lzlab_core::corpus::{DocumentParams, Lang, ToyLanguageFamily};
use lzlab_core::eval::BootstrapConfig;
use lzlab_core::finetune::{build_mask, FinetuneStrategy, TrainConfig};
use lzlab_core::model::{DecodeConfig, ModelConfig, ParameterRegistry};
use lzlab_core::probing::ProbeConfig;
use lzlab_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Summarization direction `(source language, target language)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Direction(pub Lang, pub Lang);

impl Direction {
    pub fn is_crosslingual(self) -> bool {
        self.0 != self.1
    }

    /// Both languages appear in finetuning.
    pub fn is_seen(self, train_languages: &[Lang]) -> bool {
        train_languages.contains(&self.0) && train_languages.contains(&self.1)
    }

    /// Every ordered pair over `n_languages`, intralingual included.
    pub fn all(n_languages: usize) -> Vec<Direction> {
        (0..n_languages)
            .flat_map(|s| (0..n_languages).map(move |t| Direction(s, t)))
            .collect()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("direction `{s}` is not of the form SRC-TGT"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        Ok(Direction(
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub family: ToyLanguageFamily,
    pub document: DocumentParams,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    /// Documents per language for denoising pretraining.
    pub pretrain_docs: usize,
    /// Documents whose renderings in every language feed translation pairs.
    pub translation_docs: usize,
    pub mask_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            family: ToyLanguageFamily::default(),
            document: DocumentParams {
                min_len: 12,
                max_len: 24,
                min_salient: 3,
                max_salient: 6,
                filler_rate: 0.25,
            },
            train_docs: 600,
            dev_docs: 60,
            test_docs: 40,
            pretrain_docs: 2000,
            translation_docs: 200,
            mask_rate: 0.3,
        }
    }
}

/// Model sizes; vocabulary and EOS come from the language family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ffn: 64,
            max_len: 32,
            dropout_rate: 0.0,
        }
    }
}

impl ModelSpec {
    pub fn model_config(&self, family: &ToyLanguageFamily, residual_drop: bool) -> ModelConfig {
        let mut cfg = ModelConfig {
            vocab_size: family.vocab_size(),
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            d_ffn: self.d_ffn,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
            residual_drop_layer: None,
            eos_token: family.eos(),
        };
        if residual_drop {
            cfg.residual_drop_layer = Some(cfg.middle_encoder_layer());
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSettings {
    pub beam_size: usize,
    pub max_output_len: usize,
    pub length_penalty_intralingual: f64,
    pub length_penalty_crosslingual: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_output_len: 12,
            length_penalty_intralingual: 0.6,
            length_penalty_crosslingual: 1.0,
        }
    }
}

impl DecodeSettings {
    pub fn for_direction(&self, d: Direction) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            length_penalty_alpha: if d.is_crosslingual() {
                self.length_penalty_crosslingual
            } else {
                self.length_penalty_intralingual
            },
            max_output_len: self.max_output_len,
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_strategy() -> FinetuneStrategy {
    FinetuneStrategy::Full
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub corpus: CorpusConfig,
    pub model: ModelSpec,
    /// Denoising stand-in for multilingual pretraining.
    pub pretrain: TrainConfig,
    /// Summarization finetuning.
    pub train: TrainConfig,
    /// First step of two-step finetuning; defaults to `train`.
    #[serde(default)]
    pub translation_train: Option<TrainConfig>,
    #[serde(default = "default_strategy")]
    pub strategy: FinetuneStrategy,
    #[serde(default)]
    pub adversary: AdvConfig,
    #[serde(default)]
    pub residual_drop: bool,
    #[serde(default)]
    pub two_step: bool,
    /// Also train on the evaluation directions (the upper-bound condition).
    #[serde(default)]
    pub supervised: bool,
    #[serde(default)]
    pub decode: DecodeSettings,
    pub train_languages: Vec<Lang>,
    pub eval_directions: Vec<Direction>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    /// Multilingual full finetuning on languages 0-2, evaluated on every
    /// direction not seen in training.
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let train_languages = vec![0, 1, 2];
        let eval_directions = Direction::all(corpus.family.n_languages)
            .into_iter()
            .filter(|d| !(d.0 == d.1 && train_languages.contains(&d.0)))
            .collect();
        Self {
            name: default_name(),
            corpus,
            model: ModelSpec::default(),
            pretrain: TrainConfig {
                lr_start: 5e-3,
                lr_end: 1e-4,
                max_steps: 3000,
                batch_size: 16,
                eval_every: Some(250),
                early_stop_patience: 100,
                ..TrainConfig::default()
            },
            train: TrainConfig {
                lr_start: 3e-3,
                lr_end: 1e-5,
                max_steps: 2000,
                batch_size: 16,
                eval_every: Some(100),
                early_stop_patience: 100,
                ..TrainConfig::default()
            },
            translation_train: None,
            strategy: FinetuneStrategy::Full,
            adversary: AdvConfig::default(),
            residual_drop: false,
            two_step: false,
            supervised: false,
            decode: DecodeSettings::default(),
            train_languages,
            eval_directions,
            probe: ProbeConfig::default(),
            bootstrap: None,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model
            .model_config(&self.corpus.family, self.residual_drop)
    }

    pub fn translation_config(&self) -> &TrainConfig {
        self.translation_train.as_ref().unwrap_or(&self.train)
    }

    /// Directions with summarization training data.
    pub fn supervised_directions(&self) -> Vec<Direction> {
        let mut dirs: BTreeSet<Direction> = self
            .train_languages
            .iter()
            .map(|&l| Direction(l, l))
            .collect();
        if self.supervised {
            dirs.extend(self.eval_directions.iter().copied());
        }
        dirs.into_iter().collect()
    }

    /// Every problem at once, joined into one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let check = |problems: &mut Vec<String>, r: Result<()>, field: &str| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        let family = &self.corpus.family;
        check(&mut problems, family.validate(), "corpus.family");
        check(
            &mut problems,
            self.corpus.document.validate(family),
            "corpus.document",
        );
        check(&mut problems, self.model_config().validate(), "model");
        check(&mut problems, self.pretrain.validate(), "pretrain");
        check(&mut problems, self.train.validate(), "train");
        if let Some(t) = &self.translation_train {
            check(&mut problems, t.validate(), "translation_train");
        }
        check(&mut problems, self.adversary.validate(), "adversary");
        check(
            &mut problems,
            self.decode
                .for_direction(Direction(0, 0))
                .validate()
                .and(self.decode.for_direction(Direction(0, 1)).validate()),
            "decode",
        );

        let c = &self.corpus;
        for (field, n) in [
            ("corpus.train_docs", c.train_docs),
            ("corpus.dev_docs", c.dev_docs),
            ("corpus.test_docs", c.test_docs),
            ("corpus.pretrain_docs", c.pretrain_docs),
        ] {
            if n == 0 {
                problems.push(format!("{field} must be positive"));
            }
        }
        if self.two_step && c.translation_docs == 0 {
            problems
                .push("corpus.translation_docs must be positive for two-step finetuning".into());
        }
        if !(c.mask_rate > 0.0 && c.mask_rate < 1.0) {
            problems.push(format!(
                "corpus.mask_rate must lie strictly between 0 and 1, got {}",
                c.mask_rate
            ));
        }
        // Source gets EOS and a tag appended.
        if c.document.max_len + 2 > self.model.max_len {
            problems.push(format!(
                "model.max_len {} cannot hold documents of {} tokens plus EOS and tag",
                self.model.max_len, c.document.max_len
            ));
        }

        let n = family.n_languages;
        if self.train_languages.is_empty() {
            problems.push("train_languages must not be empty".into());
        }
        let unique: BTreeSet<&Lang> = self.train_languages.iter().collect();
        if unique.len() != self.train_languages.len() {
            problems.push("train_languages contains duplicates".into());
        }
        for &l in &self.train_languages {
            if l >= n {
                problems.push(format!(
                    "train_languages: unknown language {l} (family has {n})"
                ));
            }
        }
        for d in &self.eval_directions {
            if d.0 >= n || d.1 >= n {
                problems.push(format!(
                    "eval_directions: unknown language in {d} (family has {n})"
                ));
            }
        }
        if !self.supervised {
            for d in &self.eval_directions {
                if d.0 == d.1 && self.train_languages.contains(&d.0) {
                    problems.push(format!("eval_directions: {d} is supervised, not zero-shot"));
                }
            }
        }
        if self.seeds.is_empty() {
            problems.push("seeds must not be empty".into());
        }
        if self.two_step && self.strategy != FinetuneStrategy::QueryKey {
            problems.push(
                "two_step finetuning runs its second step with the query_key strategy".into(),
            );
        }
        if self.two_step && self.adversary.mode != AdvMode::None {
            problems.push("two_step finetuning cannot be combined with an adversary".into());
        }
        if self.adversary.mode != AdvMode::None && unique.len() < 2 {
            problems.push("an adversary needs at least two training languages".into());
        }
        if self.probe.epochs == 0 {
            problems.push("probe.epochs must be at least 1".into());
        }
        if let FinetuneStrategy::Custom { .. } = self.strategy {
            match ParameterRegistry::zeros(&self.model_config().parameter_shapes()) {
                Ok(reg) => check(
                    &mut problems,
                    build_mask(&self.strategy, &reg).map(|_| ()),
                    "strategy",
                ),
                Err(e) => problems.push(format!("model: {e}")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// SHA-256 over the canonical JSON form (object keys sorted), without
    /// the seed list: a run is identified by `(hash, seed)`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object_mut()
            .expect("config is an object")
            .remove("seeds");
        hex_digest(value.to_string().as_bytes())
    }

    /// Hash of the parts that determine the pretrained checkpoint. The
    /// finetuning splits do not enter it.
    pub fn pretrain_hash(&self, seed: u64) -> String {
        let c = &self.corpus;
        let value = serde_json::json!({
            "family": c.family,
            "document": c.document,
            "pretrain_docs": c.pretrain_docs,
            "dev_docs": c.dev_docs,
            "mask_rate": c.mask_rate,
            "model": self.model,
            "pretrain": self.pretrain,
            "seed": seed,
        });
        hex_digest(value.to_string().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.eval_directions.len(), 13);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["lerning_rate"] = 1.0.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn missing_corpus_names_the_field() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v.as_object_mut().unwrap().remove("corpus");
        let err = ExperimentConfig::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("corpus"), "{err}");
    }

    #[test]
    fn all_problems_are_listed_together() {
        let cfg = ExperimentConfig {
            seeds: vec![],
            train_languages: vec![0, 9],
            eval_directions: vec![Direction(0, 0), Direction(7, 1)],
            ..ExperimentConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        for needle in ["seeds", "unknown language 9", "7-1", "0-0 is supervised"] {
            assert!(err.contains(needle), "{needle} missing from {err}");
        }
    }

    #[test]
    fn supervised_runs_may_train_on_eval_directions() {
        let cfg = ExperimentConfig {
            supervised: true,
            train_languages: vec![0],
            eval_directions: vec![Direction(3, 3)],
            ..ExperimentConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(
            cfg.supervised_directions(),
            vec![Direction(0, 0), Direction(3, 3)]
        );
    }

    #[test]
    fn conflicting_options_are_errors() {
        let two_step_full = ExperimentConfig {
            two_step: true,
            ..ExperimentConfig::default()
        };
        assert!(two_step_full.validate().is_err());
        let lonely_adversary = ExperimentConfig {
            train_languages: vec![0],
            eval_directions: vec![Direction(1, 1)],
            adversary: AdvConfig {
                mode: AdvMode::Balanced,
                ..AdvConfig::default()
            },
            ..ExperimentConfig::default()
        };
        assert!(lonely_adversary.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 64);
        let b = ExperimentConfig {
            residual_drop: true,
            ..a.clone()
        };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.pretrain_hash(0), b.pretrain_hash(0));
        assert_ne!(a.pretrain_hash(0), a.pretrain_hash(1));
        let reseeded = ExperimentConfig {
            seeds: vec![9],
            ..a.clone()
        };
        assert_eq!(a.hash(), reseeded.hash());
        let mut more_train = a.clone();
        more_train.corpus.train_docs += 1;
        assert_eq!(a.pretrain_hash(0), more_train.pretrain_hash(0));
        let mut more_pretrain = a.clone();
        more_pretrain.corpus.pretrain_docs += 1;
        assert_ne!(a.pretrain_hash(0), more_pretrain.pretrain_hash(0));
    }

    #[test]
    fn directions_parse_and_group() {
        let d: Direction = "2-0".parse().unwrap();
        assert_eq!(d, Direction(2, 0));
        assert!("2_0".parse::<Direction>().is_err());
        assert!(d.is_seen(&[0, 1, 2]) && !Direction(3, 0).is_seen(&[0, 1, 2]));
        assert_eq!(Direction::all(4).len(), 16);
    }
}
