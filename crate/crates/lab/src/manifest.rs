//! Run manifests and the method × metric tables built from them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lzlab_core::corpus::Lang;
use lzlab_core::eval::EvalReport;
use lzlab_core::finetune::TrainReport;
use lzlab_core::probing::ProbeReport;
use lzlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::Direction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: String,
    pub steps_run: usize,
    pub best_step: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
    pub final_train_loss: Option<f64>,
}

impl TrainSummary {
    pub fn new(stage: &str, r: &TrainReport) -> Self {
        Self {
            stage: stage.into(),
            steps_run: r.steps_run,
            best_step: r.best_step,
            best_dev_loss: r.best_dev_loss,
            stopped_early: r.stopped_early,
            final_train_loss: r.history.last().map(|h| h.train_loss),
        }
    }
}

/// Everything a report needs about one `(config, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub train_languages: Vec<Lang>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    /// Parameters updated in the final finetuning stage.
    pub trainable: Vec<String>,
    pub training: Vec<TrainSummary>,
    /// Zero-shot directions, keyed `"src-tgt"`.
    pub evaluations: BTreeMap<String, EvalReport>,
    /// Intralingual directions of the finetuning languages.
    #[serde(default)]
    pub supervised_evaluations: BTreeMap<String, EvalReport>,
    pub probe: Option<ProbeReport>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    /// The manifest with timing removed; identical for identical `(config, seed)`.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn report(&self, d: Direction) -> Option<&EvalReport> {
        self.evaluations.get(&d.to_string())
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.evaluations
            .keys()
            .filter_map(|k| k.parse().ok())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Mean of `metric` over the evaluated directions accepted by `keep`.
    pub fn mean_over(
        &self,
        keep: impl Fn(Direction) -> bool,
        metric: impl Fn(&EvalReport) -> f64,
    ) -> Option<f64> {
        let vals: Vec<f64> = self
            .evaluations
            .iter()
            .filter_map(|(k, r)| {
                k.parse::<Direction>()
                    .ok()
                    .filter(|&d| keep(d))
                    .map(|_| metric(r))
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Seen crosslingual directions: both languages in finetuning.
    pub fn seen(&self, d: Direction) -> bool {
        d.is_crosslingual() && d.is_seen(&self.train_languages)
    }

    /// Crosslingual directions with at least one language outside finetuning.
    pub fn unseen(&self, d: Direction) -> bool {
        d.is_crosslingual() && !d.is_seen(&self.train_languages)
    }
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "method",
    "seeds",
    "seen_rougeL",
    "seen_lang_acc",
    "unseen_rougeL",
    "unseen_lang_acc",
    "intralingual_rougeL",
    "intralingual_lang_acc",
    "supervised_rougeL",
    "supervised_lang_acc",
    "probe_acc",
];

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// One row per manifest name, each cell the mean over seeds of the per-seed
/// group average. Empty cells mark groups without directions.
pub fn report_csv(manifests: &[RunManifest]) -> Result<String> {
    let mut by_name: BTreeMap<&str, Vec<&RunManifest>> = BTreeMap::new();
    for m in manifests {
        by_name.entry(&m.name).or_default().push(m);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(REPORT_COLUMNS).map_err(io)?;
    for (name, runs) in by_name {
        let cell = |f: &dyn Fn(&RunManifest) -> Option<f64>| {
            let vals: Vec<f64> = runs.iter().filter_map(|m| f(m)).collect();
            mean(&vals).map(|v| format!("{v:.4}")).unwrap_or_default()
        };
        let rouge = |r: &EvalReport| r.rouge_l;
        let lang = |r: &EvalReport| r.lang_acc;
        w.write_record([
            name.to_string(),
            runs.len().to_string(),
            cell(&|m| m.mean_over(|d| m.seen(d), rouge)),
            cell(&|m| m.mean_over(|d| m.seen(d), lang)),
            cell(&|m| m.mean_over(|d| m.unseen(d), rouge)),
            cell(&|m| m.mean_over(|d| m.unseen(d), lang)),
            cell(&|m| m.mean_over(|d| !d.is_crosslingual(), rouge)),
            cell(&|m| m.mean_over(|d| !d.is_crosslingual(), lang)),
            cell(&|m| {
                mean(
                    &m.supervised_evaluations
                        .values()
                        .map(rouge)
                        .collect::<Vec<_>>(),
                )
            }),
            cell(&|m| {
                mean(
                    &m.supervised_evaluations
                        .values()
                        .map(lang)
                        .collect::<Vec<_>>(),
                )
            }),
            cell(&|m| m.probe.as_ref().map(|p| p.accuracy)),
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
