use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lzlab::config::{Direction, ExperimentConfig};
use lzlab::data::ExperimentData;
use lzlab::manifest::{report_csv, RunManifest};
use lzlab::recipe::{recipe, Lab};
use lzlab::run::{evaluate, pretrain, probe, run, save_pretrained};
use lzlab_core::adversarial::AdvMode;
use lzlab_core::corpus::save_jsonl;
use lzlab_core::eval::eval_table_csv;
use lzlab_core::finetune::FinetuneStrategy;
use lzlab_core::model::Seq2SeqModel;

#[derive(Parser)]
#[command(
    name = "lzlab",
    version,
    about = "Toy zero-shot crosslingual summarization lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/dev/test splits of one seed as JSONL.
    GenerateCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoising pretraining; writes a checkpoint and its history.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune from a base checkpoint, then evaluate and probe; writes a manifest.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the given directions and print a CSV table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated `src-tgt` pairs; defaults to the config's eval directions.
        #[arg(long, value_delimiter = ',')]
        directions: Option<Vec<String>>,
    },
    /// Train a fresh language probe on a checkpoint and print its report.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate manifests into a method table.
    Report {
        /// Manifest files, or directories searched for `*.manifest.json`.
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Print the default configuration as JSON, a starting point for --config.
    DefaultConfig,
    /// Run a named recipe over its seeds and print the method table.
    Recipe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = lzlab::recipe::PAPER_TRENDS)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed, replacing the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "run-name")]
    run_name: Option<String>,
    /// full, encoder_only, lna or query_key.
    #[arg(long)]
    strategy: Option<String>,
    /// none, cross_entropy or balanced.
    #[arg(long)]
    adv_mode: Option<String>,
    #[arg(long)]
    adv_weight: Option<f64>,
    #[arg(long)]
    residual_drop: Option<bool>,
    #[arg(long)]
    two_step: Option<bool>,
    #[arg(long)]
    supervised: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    train_languages: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    eval_directions: Option<Vec<String>>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
}

fn snake<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .with_context(|| format!("unknown {what} {s:?}"))
}

fn directions(raw: &[String]) -> anyhow::Result<Vec<Direction>> {
    raw.iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<Direction>()
                .map_err(|e| anyhow::anyhow!("direction {s:?}: {e}"))
        })
        .collect()
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(n) = &self.run_name {
            cfg.name = n.clone();
        }
        if let Some(s) = &self.strategy {
            cfg.strategy =
                serde_json::from_value::<FinetuneStrategy>(serde_json::json!({ "kind": s }))
                    .with_context(|| format!("unknown strategy {s:?}"))?;
        }
        if let Some(m) = &self.adv_mode {
            cfg.adversary.mode = snake::<AdvMode>(m, "adversary mode")?;
        }
        if let Some(w) = self.adv_weight {
            cfg.adversary.adv_weight = w;
        }
        if let Some(b) = self.residual_drop {
            cfg.residual_drop = b;
        }
        if let Some(b) = self.two_step {
            cfg.two_step = b;
        }
        if let Some(b) = self.supervised {
            cfg.supervised = b;
        }
        if let Some(l) = &self.train_languages {
            cfg.train_languages = l.clone();
        }
        if let Some(d) = &self.eval_directions {
            cfg.eval_directions = directions(d)?;
        }
        if let Some(n) = self.train_steps {
            cfg.train.max_steps = n;
        }
        if let Some(n) = self.pretrain_steps {
            cfg.pretrain.max_steps = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<Seq2SeqModel> {
    Seq2SeqModel::load(path, cfg.model_config())
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn manifest_paths(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let pattern = p.join("*.manifest.json");
            let mut found: Vec<PathBuf> =
                glob::glob(&pattern.to_string_lossy())?.collect::<Result<_, _>>()?;
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateCorpus { common, out } => {
            let cfg = common.config()?;
            std::fs::create_dir_all(&out)?;
            let all = Direction::all(cfg.corpus.family.n_languages);
            for &seed in &cfg.seeds {
                let data = ExperimentData::generate(&cfg.corpus, seed)?;
                for (split, corpus) in [
                    ("train", &data.train),
                    ("dev", &data.dev),
                    ("test", &data.test),
                ] {
                    let path = out.join(format!("{split}-s{seed}.jsonl"));
                    save_jsonl(&path, &ExperimentData::examples(corpus, &all)?)?;
                    println!("{}", path.display());
                }
            }
        }
        Command::Pretrain { common, out } => {
            let cfg = common.config()?;
            std::fs::create_dir_all(&out)?;
            for &seed in &cfg.seeds {
                let data = ExperimentData::generate(&cfg.corpus, seed)?;
                let pre = pretrain(&cfg, &data)?;
                let path = out.join(format!("pretrain-s{seed}.lzck"));
                save_pretrained(&pre, &path)?;
                println!(
                    "{}\tdev_loss={:.4}\tsmoke_lang_acc={:.3}",
                    path.display(),
                    pre.report.best_dev_loss,
                    pre.smoke_lang_acc
                );
            }
        }
        Command::Finetune { common, base, out } => {
            let cfg = common.config()?;
            let model = load_model(&cfg, &base)?;
            for &seed in &cfg.seeds {
                let data = ExperimentData::generate(&cfg.corpus, seed)?;
                let (manifest, _) = run(&cfg, &data, &model, Some(&base), Some(&out))?;
                println!("{}", serde_json::to_string_pretty(&manifest)?);
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            directions: dirs,
        } => {
            let cfg = common.config()?;
            let dirs = match dirs {
                Some(d) => directions(&d)?,
                None => cfg.eval_directions.clone(),
            };
            let n = cfg.corpus.family.n_languages;
            if let Some(d) = dirs.iter().find(|d| d.0 >= n || d.1 >= n) {
                bail!("unknown language in direction {d} (family has {n})");
            }
            let model = load_model(&cfg, &checkpoint)?;
            let seed = cfg.seeds[0];
            let data = ExperimentData::generate(&cfg.corpus, seed)?;
            let reports = evaluate(&cfg, &data, &model, &dirs)?;
            let rows: Vec<(String, _)> = reports.into_iter().collect();
            print!("{}", eval_table_csv(&rows)?);
        }
        Command::Probe { common, checkpoint } => {
            let cfg = common.config()?;
            let model = load_model(&cfg, &checkpoint)?;
            let data = ExperimentData::generate(&cfg.corpus, cfg.seeds[0])?;
            match probe(&cfg, &data, &model)? {
                Some(r) => println!("{}", serde_json::to_string_pretty(&r)?),
                None => bail!("probing needs at least two training languages"),
            }
        }
        Command::Report { manifests } => {
            let loaded = manifest_paths(&manifests)?
                .iter()
                .map(|p| RunManifest::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            print!("{}", report_csv(&loaded)?);
        }
        Command::DefaultConfig => {
            println!(
                "{}",
                serde_json::to_string_pretty(&ExperimentConfig::default())?
            );
        }
        Command::Recipe { common, name, out } => {
            let base = common.config()?;
            let Some(configs) = recipe(&name, &base) else {
                bail!("unknown recipe {name:?}");
            };
            let manifests = Lab::new(Some(out.clone())).run_all(&configs)?;
            let table = report_csv(&manifests)?;
            std::fs::write(out.join(format!("{name}.csv")), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}
