use std::collections::BTreeSet;

use lzlab_core::adversarial::{train_with_adversary, AdvConfig, AdvMode, LanguageClassifierHead};
use lzlab_core::corpus::{
    make_translation_pairs, DocumentParams, ParallelCorpus, ToyExample, ToyLanguageFamily,
};
use lzlab_core::finetune::{
    build_mask, dataset_loss, train, two_step_finetune, FinetuneStrategy, TrainConfig,
};
use lzlab_core::model::{DecodeConfig, EmbeddingInit, ModelConfig, Seq2SeqModel, TaggedPair};
use lzlab_core::probing::{probe_accuracy, train_probe, ProbeConfig};

fn family() -> ToyLanguageFamily {
    ToyLanguageFamily {
        n_languages: 3,
        n_concepts: 16,
        n_fillers: 8,
    }
}

fn params() -> DocumentParams {
    DocumentParams {
        min_len: 6,
        max_len: 10,
        min_salient: 2,
        max_salient: 3,
        filler_rate: 0.25,
    }
}

fn model(seed: u64) -> Seq2SeqModel {
    let f = family();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        d_ffn: 32,
        max_len: 16,
        ..ModelConfig::for_family(&f)
    };
    Seq2SeqModel::new(cfg, &EmbeddingInit::Structured(f), seed).unwrap()
}

fn examples(n_docs: usize, seed: u64, langs: &[usize]) -> Vec<ToyExample> {
    let corpus = ParallelCorpus::generate(&family(), &params(), n_docs, seed).unwrap();
    langs
        .iter()
        .flat_map(|&l| corpus.summarization(l, l).unwrap())
        .collect()
}

fn pairs(n_docs: usize, seed: u64, langs: &[usize]) -> Vec<TaggedPair> {
    TaggedPair::from_examples(&family(), &examples(n_docs, seed, langs))
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        lr_start: 3e-3,
        lr_end: 1e-4,
        max_steps: steps,
        batch_size: 8,
        weight_decay: 0.0,
        early_stop_patience: 100,
        eval_every: Some(20),
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn strategies_freeze_their_complement_for_100_steps() {
    let train_data = pairs(20, 1, &[0, 1]);
    let dev = pairs(4, 2, &[0, 1]);
    for strategy in [
        FinetuneStrategy::QueryKey,
        FinetuneStrategy::EncoderOnly,
        FinetuneStrategy::Lna,
        FinetuneStrategy::Full,
    ] {
        let init = model(0);
        let mut m = init.clone();
        let mask = build_mask(&strategy, &m.params).unwrap();
        // Keep the last step's parameters so untouched values are not masked by restoration.
        let run = TrainConfig {
            eval_every: Some(1000),
            ..cfg(100)
        };
        let report = train(&mut m, &train_data, &dev, &strategy, &run, None).unwrap();
        assert_eq!(report.steps_run, 100);
        assert_eq!(report.trainable, mask.iter().cloned().collect::<Vec<_>>());
        let mut moved = 0;
        for (name, p) in m.params.iter() {
            let before = &init.params.get(name).unwrap().data;
            if mask.contains(name) {
                moved += (before != &p.data) as usize;
            } else {
                assert!(
                    before
                        .iter()
                        .zip(&p.data)
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                    "{} changed under {}",
                    name,
                    strategy.label()
                );
            }
        }
        assert!(moved > 0, "{} updated nothing", strategy.label());
    }
}

#[test]
fn training_lowers_dev_loss_and_restores_best_checkpoint() {
    let train_data = pairs(40, 1, &[0, 1, 2]);
    let dev = pairs(8, 2, &[0, 1, 2]);
    let mut m = model(0);
    let before = dataset_loss(&m, &dev, 32).unwrap();
    let report = train(
        &mut m,
        &train_data,
        &dev,
        &FinetuneStrategy::Full,
        &cfg(200),
        None,
    )
    .unwrap();
    let after = dataset_loss(&m, &dev, 32).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
    assert_eq!(after, report.best_dev_loss);
    let best = report
        .history
        .iter()
        .map(|h| h.dev_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best, report.best_dev_loss);
    assert!(report.history.iter().any(|h| h.step == report.best_step));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let train_data = pairs(20, 1, &[0, 1]);
    let dev = pairs(4, 2, &[0, 1]);
    let run = || {
        let mut m = model(3);
        let r = train(
            &mut m,
            &train_data,
            &dev,
            &FinetuneStrategy::Lna,
            &cfg(60),
            None,
        )
        .unwrap();
        (m.params.checksum(), r)
    };
    assert_eq!(run(), run());
    let mut other = model(3);
    let shuffled = TrainConfig { seed: 6, ..cfg(60) };
    train(
        &mut other,
        &train_data,
        &dev,
        &FinetuneStrategy::Lna,
        &shuffled,
        None,
    )
    .unwrap();
    assert_ne!(other.params.checksum(), run().0);
}

#[test]
fn two_step_trains_everything_then_query_key() {
    let f = family();
    let summaries = examples(12, 1, &[0, 1, 2]);
    let translation = TaggedPair::from_examples(&f, &make_translation_pairs(&f, &summaries));
    let trans_dev = translation[..8].to_vec();
    let train_data = pairs(12, 1, &[0, 1]);
    let dev = pairs(4, 2, &[0, 1]);
    let mut m = model(0);
    let r = two_step_finetune(
        &mut m,
        (&translation, &trans_dev),
        (&train_data, &dev),
        &cfg(40),
        &cfg(40),
    )
    .unwrap();
    let full = build_mask(&FinetuneStrategy::Full, &m.params).unwrap();
    let qk = build_mask(&FinetuneStrategy::QueryKey, &m.params).unwrap();
    assert_eq!(
        r.translation
            .trainable
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>(),
        full
    );
    assert_eq!(
        r.summarization
            .trainable
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>(),
        qk
    );

    // Replaying the translation step alone gives the same non-QK weights.
    let mut replay = model(0);
    train(
        &mut replay,
        &translation,
        &trans_dev,
        &FinetuneStrategy::Full,
        &cfg(40),
        None,
    )
    .unwrap();
    for (name, p) in m.params.iter() {
        if !qk.contains(name) {
            assert_eq!(p.data, replay.params.get(name).unwrap().data, "{name}");
        }
    }
    assert!(two_step_finetune(
        &mut m,
        (&[], &trans_dev),
        (&train_data, &dev),
        &cfg(1),
        &cfg(1)
    )
    .is_err());
}

#[test]
fn zero_weight_adversary_leaves_the_model_bit_identical() {
    let train_data: Vec<TaggedPair> = pairs(16, 1, &[0, 1]);
    let dev = pairs(4, 2, &[0, 1]);
    let mut plain = model(0);
    train(
        &mut plain,
        &train_data,
        &dev,
        &FinetuneStrategy::Full,
        &cfg(40),
        None,
    )
    .unwrap();
    for mode in [AdvMode::CrossEntropy, AdvMode::Balanced] {
        let mut adv = model(0);
        let head = LanguageClassifierHead::zeros(16, vec![0, 1]).unwrap();
        let config = AdvConfig {
            mode,
            adv_weight: 0.0,
            ..AdvConfig::default()
        };
        let (report, head) = train_with_adversary(
            &mut adv,
            head,
            &train_data,
            &dev,
            &FinetuneStrategy::Full,
            &cfg(40),
            &config,
        )
        .unwrap();
        assert_eq!(adv.params.checksum(), plain.params.checksum());
        assert!(report.history.iter().all(|h| h.classifier_acc.is_some()));
        // The head still learns from detached states.
        assert!(head
            .params
            .iter()
            .any(|(_, p)| p.data.iter().any(|&v| v != 0.0)));
    }
}

#[test]
fn balanced_adversary_pushes_classifier_toward_uniform() {
    let train_data: Vec<TaggedPair> = pairs(30, 1, &[0, 1, 2]);
    let dev = pairs(6, 2, &[0, 1, 2]);
    let run = |weight: f64| {
        let mut m = model(0);
        let head = LanguageClassifierHead::zeros(16, vec![0, 1, 2]).unwrap();
        let config = AdvConfig {
            mode: AdvMode::Balanced,
            adv_weight: weight,
            ..AdvConfig::default()
        };
        let (r, _) = train_with_adversary(
            &mut m,
            head,
            &train_data,
            &dev,
            &FinetuneStrategy::Full,
            &cfg(200),
            &config,
        )
        .unwrap();
        r.history.last().unwrap().adv_loss.unwrap()
    };
    let (off, on) = (run(0.0), run(3.0));
    assert!(on < off, "KL to uniform {on} not below unregularized {off}");
}

#[test]
fn probe_reads_language_without_touching_the_model() {
    let m = model(0);
    let checksum = m.params.checksum();
    let train_data = pairs(30, 1, &[0, 1, 2]);
    let test = pairs(10, 3, &[0, 1, 2]);
    let head = train_probe(&m, &train_data, vec![0, 1, 2], &ProbeConfig::default()).unwrap();
    assert_eq!(m.params.checksum(), checksum);
    let report = probe_accuracy(&head, &m, &test).unwrap();
    // Structured embeddings carry a language offset on every content token.
    assert!(report.accuracy > 0.9, "{}", report.accuracy);
    assert!((report.chance - 1.0 / 3.0).abs() < 1e-12);
    let again = train_probe(&m, &train_data, vec![0, 1, 2], &ProbeConfig::default()).unwrap();
    assert_eq!(probe_accuracy(&again, &m, &test).unwrap(), report);
}

#[test]
fn trained_checkpoint_decodes_identically_after_reload() {
    let train_data = pairs(30, 1, &[0]);
    let dev = pairs(6, 2, &[0]);
    let mut m = model(0);
    train(
        &mut m,
        &train_data,
        &dev,
        &FinetuneStrategy::Full,
        &cfg(150),
        None,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lzck");
    m.save(&path).unwrap();
    let loaded = Seq2SeqModel::load(&path, m.config.clone()).unwrap();
    assert_eq!(loaded, m);
    let decode = DecodeConfig {
        beam_size: 3,
        max_output_len: 6,
        ..DecodeConfig::default()
    };
    for p in &dev {
        let a = m.beam_decode(&p.src, p.tgt_in[0], &decode).unwrap();
        let b = loaded.beam_decode(&p.src, p.tgt_in[0], &decode).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.tokens.len() <= 6);
    }
}
