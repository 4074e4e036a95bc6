use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{check_gradients, ParamSpec};

fn tiny(vocab: usize, d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_heads: 2,
        n_encoder_layers: layers,
        n_decoder_layers: layers,
        d_ffn: 2 * d,
        max_len: 12,
        dropout_rate: 0.0,
        residual_drop_layer: None,
        eos_token: 1,
    }
}

fn model(cfg: ModelConfig, seed: u64) -> Seq2SeqModel {
    Seq2SeqModel::new(cfg, &EmbeddingInit::Random, seed).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| rng.gen_range(0..vocab as TokenId))
        .collect()
}

#[test]
fn registry_names_are_unique_and_partitioned() {
    let cfg = tiny(20, 8, 2);
    let m = model(cfg.clone(), 0);
    let names: HashSet<&String> = m.params.names().iter().collect();
    assert_eq!(names.len(), m.params.len());
    assert!(m
        .params
        .names()
        .iter()
        .all(|n| n.starts_with("encoder.") || n.starts_with("decoder.")));
    let qk: Vec<_> = m
        .params
        .names()
        .iter()
        .filter(|n| n.contains(".q_proj.") || n.contains(".k_proj."))
        .collect();
    // enc self, dec self, dec cross per layer, weight + bias, q and k
    assert_eq!(qk.len(), 2 * 3 * 2 * 2);
    assert!(m
        .params
        .get("decoder.layer1.cross_attn.k_proj.bias")
        .is_some());
    assert!(m
        .params
        .get("encoder.layer0.cross_attn.q_proj.weight")
        .is_none());
}

#[test]
fn config_validation() {
    let mut cfg = tiny(20, 8, 2);
    cfg.n_heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(20, 8, 2);
    cfg.residual_drop_layer = Some(2);
    assert!(cfg.validate().is_err());
    cfg.residual_drop_layer = Some(1);
    assert!(cfg.validate().is_ok());
    assert_eq!(cfg.middle_encoder_layer(), 1);
}

#[test]
fn zero_weights_collapse_to_normalized_embeddings() {
    let cfg = tiny(20, 8, 2);
    let mut m = model(cfg.clone(), 3);
    let names: Vec<String> = m.params.names().to_vec();
    for n in &names {
        if !n.contains("embed") && !n.ends_with("layernorm.weight") {
            m.params.get_mut(n).unwrap().data.fill(0.0);
        }
    }
    let tokens = [4, 7, 7, 2];
    let out = m.encode(&tokens).unwrap();
    let tok = &m.params.get("encoder.embed_tokens.weight").unwrap().data;
    let pos = &m.params.get("encoder.embed_positions.weight").unwrap().data;
    let d = cfg.d_model;
    for (i, &t) in tokens.iter().enumerate() {
        let x: Vec<f64> = (0..d)
            .map(|j| (tok[t as usize * d + j] + pos[i * d + j]) as f64)
            .collect();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            let want = (x[j] - mean) / (var + 1e-5).sqrt();
            assert!((out[i * d + j] as f64 - want).abs() < 1e-4);
        }
    }
    assert_eq!(m.encode(&tokens).unwrap(), out);
}

#[test]
fn encode_is_deterministic_and_checks_vocabulary() {
    let m = model(tiny(20, 8, 2), 1);
    let a = m.encode(&[3, 4, 5]).unwrap();
    let b = m.encode(&[3, 4, 5]).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(matches!(m.encode(&[3, 20]), Err(crate::Error::Input(_))));
    assert!(m.encode(&[1; 13]).is_err());
}

#[test]
fn residual_drop_only_changes_later_layers() {
    let mut cfg = tiny(20, 8, 3);
    let base = model(cfg.clone(), 5);
    cfg.residual_drop_layer = Some(1);
    let dropped = Seq2SeqModel {
        config: cfg,
        params: base.params.clone(),
    };
    let tokens: &[TokenId] = &[2, 9, 14, 3, 1];
    let layers = |m: &Seq2SeqModel| -> Vec<Vec<f32>> {
        let tape = Tape::<f32>::new();
        let w = Weights::bind(&m.params, &tape, |_| false);
        let (_, ls) = m.forward().encode_layers(&w, &[tokens], None).unwrap();
        ls.iter().map(|t| t.to_vec()).collect()
    };
    let (a, b) = (layers(&base), layers(&dropped));
    assert_eq!(a[0], b[0]);
    assert_ne!(a[1], b[1]);
    assert_ne!(a[2], b[2]);
    assert_ne!(
        base.encode(tokens).unwrap(),
        dropped.encode(tokens).unwrap()
    );
}

fn batch(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<TaggedPair> {
    (0..n)
        .map(|_| {
            let sl = rng.gen_range(1..6);
            let tl = rng.gen_range(1..5);
            let src = random_tokens(rng, vocab, sl);
            let tgt = random_tokens(rng, vocab, tl);
            TaggedPair::new(&src, 2, &tgt, 3, 1)
        })
        .collect()
}

#[test]
fn uniform_output_gives_log_vocab_loss() {
    let cfg = tiny(20, 8, 2);
    let mut m = model(cfg, 2);
    m.params
        .get_mut("encoder.embed_tokens.weight")
        .unwrap()
        .data
        .fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = m.seq2seq_loss(&batch(&mut rng, 20, 4)).unwrap();
    assert!((loss as f64 - (20f64).ln()).abs() < 1e-5);
}

#[test]
fn loss_is_nonnegative_and_order_invariant() {
    let m = model(tiny(20, 8, 2), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = batch(&mut rng, 20, 6);
    let l1 = m.seq2seq_loss(&b).unwrap();
    b.reverse();
    let l2 = m.seq2seq_loss(&b).unwrap();
    assert!(l1 >= 0.0);
    assert!((l1 - l2).abs() < 1e-5);
    assert!(matches!(m.seq2seq_loss(&[]), Err(crate::Error::Input(_))));
}

#[test]
fn tagged_pair_layout() {
    let p = TaggedPair::new(&[10, 11], 90, &[20, 21, 22], 91, 1);
    assert_eq!(p.src, vec![10, 11, 1, 90]);
    assert_eq!(p.tgt_in, vec![91, 20, 21, 22]);
    assert_eq!(p.tgt_out, vec![20, 21, 22, 1]);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = tiny(11, 8, 2);
    let m = model(cfg.clone(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = batch(&mut rng, 11, 2);
    let specs: Vec<ParamSpec> = m
        .params
        .iter()
        .map(|(name, p)| {
            let mut data: Vec<f64> = p.data.iter().map(|&v| v as f64).collect();
            // break the zero-bias/unit-gain symmetry so every path is exercised
            data.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            ParamSpec::new(name, data, &p.shape)
        })
        .collect();
    let report = check_gradients(
        |tape, leaves| {
            let _ = tape;
            let w = Weights::from_tensors(&m.params, leaves.to_vec())?;
            Ok(Forward::new(&cfg).seq2seq_loss(&w, &b, None)?.0)
        },
        &specs,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(
        report.passed(),
        "{:?}",
        report
            .entries
            .iter()
            .filter(|e| e.1 > 1e-4)
            .collect::<Vec<_>>()
    );
}

/// Table-driven scorer: distribution depends only on the prefix.
struct TableScorer<F: Fn(&[TokenId]) -> Vec<f64>> {
    eos: TokenId,
    probs: F,
}

impl<F: Fn(&[TokenId]) -> Vec<f64>> StepScorer for TableScorer<F> {
    fn eos(&self) -> TokenId {
        self.eos
    }
    fn log_probs(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| (self.probs)(p).iter().map(|v| v.ln()).collect())
            .collect())
    }
}

fn enumerate_best<F: Fn(&[TokenId]) -> Vec<f64>>(
    s: &TableScorer<F>,
    max_len: usize,
) -> (Vec<TokenId>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(Vec::<TokenId>::new(), 0.0f64)];
    while let Some((prefix, lp)) = stack.pop() {
        if prefix.len() == max_len {
            continue;
        }
        let probs = (s.probs)(&prefix);
        for (t, p) in probs.iter().enumerate() {
            let l = lp + p.ln();
            if t as TokenId == s.eos {
                if l > best.1 {
                    best = (prefix.clone(), l);
                }
            } else {
                let mut next = prefix.clone();
                next.push(t as TokenId);
                stack.push((next, l));
            }
        }
    }
    best
}

#[test]
fn beam_recovers_sequence_greedy_misses() {
    // tokens a=0, b=1, EOS=2; every output is two tokens long
    let scorer = TableScorer {
        eos: 2,
        probs: |p: &[TokenId]| match p {
            [] => vec![0.6, 0.4, 0.0],
            [0] => vec![0.5, 0.5, 0.0],
            [1] => vec![0.9, 0.1, 0.0],
            _ => vec![0.0, 0.0, 1.0],
        },
    };
    let cfg = DecodeConfig {
        beam_size: 2,
        length_penalty_alpha: 0.0,
        max_output_len: 4,
    };
    let greedy = greedy_search(&scorer, 4, 0.0).unwrap();
    assert_eq!(greedy.tokens, vec![0, 0]);
    let beam = beam_search(&scorer, &cfg).unwrap();
    let (oracle, oracle_lp) = enumerate_best(&scorer, 4);
    assert_eq!(oracle, vec![1, 0]);
    assert_eq!(beam.tokens, oracle);
    assert!((beam.log_prob - oracle_lp).abs() < 1e-12);
    assert_eq!(beam.score, beam.log_prob);
    let one = beam_search(
        &scorer,
        &DecodeConfig {
            beam_size: 1,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(one, greedy);
}

#[test]
fn unfinished_hypothesis_is_flagged() {
    let scorer = TableScorer {
        eos: 2,
        probs: |_: &[TokenId]| vec![0.7, 0.3, 0.0],
    };
    let cfg = DecodeConfig {
        beam_size: 3,
        length_penalty_alpha: 1.0,
        max_output_len: 3,
    };
    let d = beam_search(&scorer, &cfg).unwrap();
    assert!(!d.finished);
    assert_eq!(d.tokens, vec![0, 0, 0]);
    assert!(DecodeConfig {
        beam_size: 0,
        ..cfg
    }
    .validate()
    .is_err());
}

fn random_table(seed: u64) -> impl Fn(&[TokenId]) -> Vec<f64> {
    move |p: &[TokenId]| {
        let key = p
            .iter()
            .fold(seed, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn beam_never_scores_below_greedy(seed in any::<u64>(), k in 1usize..5, alpha in 0.0f64..1.5) {
            let scorer = TableScorer { eos: 3, probs: random_table(seed) };
            let cfg = DecodeConfig { beam_size: k, length_penalty_alpha: alpha, max_output_len: 5 };
            let greedy = greedy_search(&scorer, 5, alpha).unwrap();
            let beam = beam_search(&scorer, &cfg).unwrap();
            prop_assert!((beam.finished, beam.score) >= (greedy.finished, greedy.score));
        }

        #[test]
        fn zero_alpha_score_is_log_prob(seed in any::<u64>(), k in 1usize..4) {
            let scorer = TableScorer { eos: 3, probs: random_table(seed) };
            let cfg = DecodeConfig { beam_size: k, length_penalty_alpha: 0.0, max_output_len: 5 };
            let d = beam_search(&scorer, &cfg).unwrap();
            prop_assert_eq!(d.score, d.log_prob);
        }
    }
}

#[test]
fn model_decoding_is_deterministic() {
    let m = model(tiny(20, 8, 2), 8);
    let cfg = DecodeConfig {
        beam_size: 3,
        length_penalty_alpha: 0.6,
        max_output_len: 6,
    };
    let a = m.beam_decode(&[4, 5, 6, 1, 2], 3, &cfg).unwrap();
    let b = m.beam_decode(&[4, 5, 6, 1, 2], 3, &cfg).unwrap();
    assert_eq!(a, b);
    let g = m.greedy_decode(&[4, 5, 6, 1, 2], 3, 6).unwrap();
    let one = m
        .beam_decode(
            &[4, 5, 6, 1, 2],
            3,
            &DecodeConfig {
                beam_size: 1,
                ..cfg
            },
        )
        .unwrap();
    assert_eq!(g.tokens, one.tokens);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(20, 8, 2);
    let m = model(cfg.clone(), 11);
    let p1 = dir.path().join("a.lzck");
    let p2 = dir.path().join("b.lzck");
    m.save(&p1).unwrap();
    let loaded = Seq2SeqModel::load(&p1, cfg.clone()).unwrap();
    assert_eq!(loaded, m);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let dc = DecodeConfig {
        beam_size: 2,
        length_penalty_alpha: 1.0,
        max_output_len: 5,
    };
    assert_eq!(
        m.beam_decode(&[5, 6, 1, 2], 3, &dc).unwrap(),
        loaded.beam_decode(&[5, 6, 1, 2], 3, &dc).unwrap()
    );
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(20, 8, 2);
    let m = model(cfg.clone(), 12);
    let path = dir.path().join("m.lzck");
    m.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        Seq2SeqModel::load(&path, cfg.clone()),
        Err(crate::Error::Format(_))
    ));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        Seq2SeqModel::load(&path, cfg.clone()),
        Err(crate::Error::Format(_))
    ));

    let mut other = cfg.clone();
    other.n_decoder_layers = 1;
    let small = model(other.clone(), 1);
    small.save(&path).unwrap();
    let err = Seq2SeqModel::load(&path, cfg.clone()).unwrap_err();
    assert!(err.to_string().contains("missing parameter"), "{err}");
    m.save(&path).unwrap();
    let err = Seq2SeqModel::load(&path, other).unwrap_err();
    assert!(err.to_string().contains("unknown parameter"), "{err}");
}

#[test]
fn structured_embeddings_share_language_offsets() {
    let family = ToyLanguageFamily::default();
    let cfg = ModelConfig::for_family(&family);
    let m = Seq2SeqModel::new(cfg.clone(), &EmbeddingInit::Structured(family.clone()), 0).unwrap();
    let e = &m.params.get("encoder.embed_tokens.weight").unwrap().data;
    let d = cfg.d_model;
    let row = |t: TokenId| &e[t as usize * d..(t as usize + 1) * d];
    use crate::corpus::Unit;
    let diff = |a: TokenId, b: TokenId| -> Vec<f32> {
        row(a).iter().zip(row(b)).map(|(x, y)| x - y).collect()
    };
    let d1 = diff(
        family.render(1, Unit::Concept(3)),
        family.render(0, Unit::Concept(3)),
    );
    let d2 = diff(
        family.render(1, Unit::Filler(7)),
        family.render(0, Unit::Filler(7)),
    );
    for (a, b) in d1.iter().zip(&d2) {
        assert!((a - b).abs() < 1e-6);
    }
}
