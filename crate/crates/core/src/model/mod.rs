//! Pre-LN encoder-decoder transformer over packed sequences.
//!
//! Every learnable tensor lives in a [`ParameterRegistry`] under a dotted
//! canonical name such as `encoder.layer1.self_attn.q_proj.weight`. The token
//! embedding `encoder.embed_tokens.weight` is shared by encoder, decoder and
//! the output projection. A forward pass binds the registry onto a fresh
//! [`Tape`], choosing per name whether the tensor receives gradients.

mod checkpoint;
mod decode;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, TokenId, TokenKind, ToyExample, ToyLanguageFamily};
use crate::error::{ensure, Result};
use crate::tensor::{AttentionLayout, Scalar, Segment, Tape, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use decode::{beam_search, greedy_search, DecodeConfig, Decoded, StepScorer};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Encoder layer whose self-attention sublayer loses its residual connection.
    #[serde(default)]
    pub residual_drop_layer: Option<usize>,
    pub eos_token: TokenId,
}

impl ModelConfig {
    /// Default sizes for a toy language family.
    pub fn for_family(family: &ToyLanguageFamily) -> Self {
        Self {
            vocab_size: family.vocab_size(),
            d_model: 32,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ffn: 64,
            max_len: 72,
            dropout_rate: 0.0,
            residual_drop_layer: None,
            eos_token: family.eos(),
        }
    }

    pub fn middle_encoder_layer(&self) -> usize {
        self.n_encoder_layers / 2
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size > 0, Config, "vocab_size must be positive");
        ensure!(
            self.d_model > 0 && self.n_heads > 0,
            Config,
            "d_model and n_heads must be positive"
        );
        ensure!(
            self.d_model.is_multiple_of(self.n_heads),
            Config,
            "d_model {} is not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(
            self.n_encoder_layers > 0 && self.n_decoder_layers > 0,
            Config,
            "need at least one layer on each side"
        );
        ensure!(
            self.d_ffn > 0 && self.max_len > 0,
            Config,
            "d_ffn and max_len must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            Config,
            "dropout_rate must lie in [0, 1)"
        );
        if let Some(l) = self.residual_drop_layer {
            ensure!(
                l < self.n_encoder_layers,
                Config,
                "residual_drop_layer {l} out of range for {} encoder layers",
                self.n_encoder_layers
            );
        }
        ensure!(
            (self.eos_token as usize) < self.vocab_size,
            Config,
            "eos_token outside the vocabulary"
        );
        Ok(())
    }

    /// Canonical names and shapes, in registry order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ffn);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            (
                "encoder.embed_tokens.weight".into(),
                vec![self.vocab_size, d],
            ),
            (
                "encoder.embed_positions.weight".into(),
                vec![self.max_len, d],
            ),
            (
                "decoder.embed_positions.weight".into(),
                vec![self.max_len, d],
            ),
        ];
        let linear =
            |out: &mut Vec<(String, Vec<usize>)>, prefix: String, n_out: usize, n_in: usize| {
                out.push((format!("{prefix}.weight"), vec![n_out, n_in]));
                out.push((format!("{prefix}.bias"), vec![n_out]));
            };
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: String| {
            out.push((format!("{prefix}.weight"), vec![d]));
            out.push((format!("{prefix}.bias"), vec![d]));
        };
        for (side, n_layers) in [
            ("encoder", self.n_encoder_layers),
            ("decoder", self.n_decoder_layers),
        ] {
            for i in 0..n_layers {
                let p = format!("{side}.layer{i}");
                let blocks: &[&str] = if side == "encoder" {
                    &["self_attn"]
                } else {
                    &["self_attn", "cross_attn"]
                };
                for block in blocks {
                    for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                        linear(&mut out, format!("{p}.{block}.{proj}"), d, d);
                    }
                    norm(&mut out, format!("{p}.{block}_layernorm"));
                }
                linear(&mut out, format!("{p}.fc1"), f, d);
                linear(&mut out, format!("{p}.fc2"), d, f);
                norm(&mut out, format!("{p}.final_layernorm"));
            }
            norm(&mut out, format!("{side}.layernorm"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered name → tensor map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterRegistry {
    names: Vec<String>,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterRegistry {
    pub fn zeros(shapes: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut reg = Self {
            names: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
        };
        for (name, shape) in shapes {
            reg.insert(
                name.clone(),
                shape.clone(),
                vec![0.0; shape.iter().product()],
            )?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        ensure!(
            !self.index.contains_key(&name),
            Contract,
            "duplicate parameter name {name}"
        );
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            Contract,
            "parameter {name}: shape {shape:?} does not match {} values",
            data.len()
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.params.push(Parameter { shape, data });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// FNV-1a over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, p) in self.iter() {
            feed(name.as_bytes());
            for &s in &p.shape {
                feed(&(s as u64).to_le_bytes());
            }
            for &v in &p.data {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Registry tensors bound onto one tape.
pub struct Weights<'r, 't, T: Scalar> {
    registry: &'r ParameterRegistry,
    tensors: Vec<Tensor<'t, T>>,
}

impl<'r, 't, T: Scalar> Weights<'r, 't, T> {
    /// Binds every parameter as a leaf; `trainable(name)` decides which receive gradients.
    pub fn bind(
        registry: &'r ParameterRegistry,
        tape: &'t Tape<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let tensors = registry
            .iter()
            .map(|(name, p)| {
                let data = p.data.iter().map(|&v| T::from_f32(v).unwrap()).collect();
                tape.leaf(data, &p.shape, trainable(name))
            })
            .collect();
        Self { registry, tensors }
    }

    /// Uses caller-provided tensors, in registry order.
    pub fn from_tensors(
        registry: &'r ParameterRegistry,
        tensors: Vec<Tensor<'t, T>>,
    ) -> Result<Self> {
        ensure!(
            tensors.len() == registry.len(),
            Contract,
            "{} tensors for a registry of {}",
            tensors.len(),
            registry.len()
        );
        Ok(Self { registry, tensors })
    }

    pub fn get(&self, name: &str) -> Tensor<'t, T> {
        let i = self
            .registry
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from registry"));
        self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<'t, T>] {
        &self.tensors
    }

    pub fn registry(&self) -> &'r ParameterRegistry {
        self.registry
    }
}

/// One training pair with tags and EOS already placed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedPair {
    /// `src ++ [EOS, src_tag]`
    pub src: Vec<TokenId>,
    /// `[tgt_tag] ++ tgt`
    pub tgt_in: Vec<TokenId>,
    /// `tgt ++ [EOS]`
    pub tgt_out: Vec<TokenId>,
    /// Label for language classifiers on the encoder side.
    pub src_lang: Lang,
}

impl TaggedPair {
    pub fn new(
        src: &[TokenId],
        src_tag: TokenId,
        tgt: &[TokenId],
        tgt_tag: TokenId,
        eos: TokenId,
    ) -> Self {
        let mut s = src.to_vec();
        s.extend([eos, src_tag]);
        let mut tin = vec![tgt_tag];
        tin.extend_from_slice(tgt);
        let mut tout = tgt.to_vec();
        tout.push(eos);
        Self {
            src: s,
            tgt_in: tin,
            tgt_out: tout,
            src_lang: 0,
        }
    }

    pub fn with_src_lang(mut self, lang: Lang) -> Self {
        self.src_lang = lang;
        self
    }

    pub fn from_example(family: &ToyLanguageFamily, ex: &ToyExample) -> Self {
        Self::new(
            &ex.src,
            family.tag(ex.src_lang),
            &ex.tgt,
            family.tag(ex.tgt_lang),
            family.eos(),
        )
        .with_src_lang(ex.src_lang)
    }

    pub fn from_examples(family: &ToyLanguageFamily, data: &[ToyExample]) -> Vec<Self> {
        data.iter()
            .map(|ex| Self::from_example(family, ex))
            .collect()
    }
}

/// Encoder input for a bare source sequence in `lang`.
pub fn tag_source(family: &ToyLanguageFamily, src: &[TokenId], lang: Lang) -> Vec<TokenId> {
    let mut s = src.to_vec();
    s.extend([family.eos(), family.tag(lang)]);
    s
}

/// Packed hidden states: rows of sequence `i` are `spans[i].0 .. spans[i].0 + spans[i].1`.
pub struct Packed<'t, T: Scalar> {
    pub hidden: Tensor<'t, T>,
    pub spans: Vec<(usize, usize)>,
}

fn pack_spans(lens: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.map(|l| {
        let s = (start, l);
        start += l;
        s
    })
    .collect()
}

fn self_segments(spans: &[(usize, usize)]) -> Vec<Segment> {
    spans
        .iter()
        .map(|&(s, l)| Segment {
            q_start: s,
            q_len: l,
            k_start: s,
            k_len: l,
        })
        .collect()
}

/// Forward computation for one configuration. Stateless apart from the optional dropout RNG.
pub struct Forward<'c> {
    pub config: &'c ModelConfig,
    pub residual_drop: bool,
}

impl<'c> Forward<'c> {
    pub fn new(config: &'c ModelConfig) -> Self {
        Self {
            config,
            residual_drop: true,
        }
    }

    fn embed<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        positions: &str,
        seqs: &[&[TokenId]],
    ) -> Result<(Tensor<'t, T>, Vec<(usize, usize)>)> {
        let tape = w.get(positions).tape();
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            ensure!(!s.is_empty(), Input, "empty sequence");
            ensure!(
                s.len() <= self.config.max_len,
                Input,
                "sequence of length {} exceeds max_len {}",
                s.len(),
                self.config.max_len
            );
            for (i, &t) in s.iter().enumerate() {
                ensure!(
                    (t as usize) < self.config.vocab_size,
                    Input,
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab_size
                );
                ids.push(t as usize);
                pos.push(i);
            }
        }
        let tok = tape.embedding(w.get("encoder.embed_tokens.weight"), &ids)?;
        let pe = tape.embedding(w.get(positions), &pos)?;
        Ok((tok.add(pe)?, pack_spans(seqs.iter().map(|s| s.len()))))
    }

    fn norm<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        x: Tensor<'t, T>,
        prefix: &str,
    ) -> Result<Tensor<'t, T>> {
        x.layer_norm(
            w.get(&format!("{prefix}.weight")),
            w.get(&format!("{prefix}.bias")),
            T::from_f64(LN_EPS).unwrap(),
        )
    }

    fn proj<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        x: Tensor<'t, T>,
        prefix: &str,
    ) -> Result<Tensor<'t, T>> {
        x.linear(
            w.get(&format!("{prefix}.weight")),
            Some(w.get(&format!("{prefix}.bias"))),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        prefix: &str,
        queries: Tensor<'t, T>,
        memory: Tensor<'t, T>,
        segments: Vec<Segment>,
        causal: bool,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<'t, T>> {
        let q = self.proj(w, queries, &format!("{prefix}.q_proj"))?;
        let k = self.proj(w, memory, &format!("{prefix}.k_proj"))?;
        let v = self.proj(w, memory, &format!("{prefix}.v_proj"))?;
        let layout = AttentionLayout {
            n_heads: self.config.n_heads,
            segments,
            causal,
        };
        let a = q.attention(k, v, &layout)?;
        let out = self.proj(w, a, &format!("{prefix}.out_proj"))?;
        self.dropout(out, rng)
    }

    fn ffn<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        x: Tensor<'t, T>,
        prefix: &str,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<'t, T>> {
        let h = self.norm(w, x, &format!("{prefix}.final_layernorm"))?;
        let h = self.proj(w, h, &format!("{prefix}.fc1"))?.relu();
        let h = self.proj(w, h, &format!("{prefix}.fc2"))?;
        self.dropout(h, rng)?.add(x)
    }

    fn dropout<'t, T: Scalar>(
        &self,
        x: Tensor<'t, T>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<'t, T>> {
        match rng {
            Some(r) if self.config.dropout_rate > 0.0 => {
                x.dropout(self.config.dropout_rate, &mut **r)
            }
            _ => Ok(x),
        }
    }

    /// Encoder stack; returns the final normalized states and, per layer, the pre-norm layer outputs.
    pub fn encode_layers<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        seqs: &[&[TokenId]],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Packed<'t, T>, Vec<Tensor<'t, T>>)> {
        ensure!(!seqs.is_empty(), Input, "empty batch");
        let (mut x, spans) = self.embed(w, "encoder.embed_positions.weight", seqs)?;
        x = self.dropout(x, &mut rng)?;
        let mut layers = Vec::with_capacity(self.config.n_encoder_layers);
        for i in 0..self.config.n_encoder_layers {
            let p = format!("encoder.layer{i}");
            let h = self.norm(w, x, &format!("{p}.self_attn_layernorm"))?;
            let a = self.attention(
                w,
                &format!("{p}.self_attn"),
                h,
                h,
                self_segments(&spans),
                false,
                &mut rng,
            )?;
            let drop = self.residual_drop && self.config.residual_drop_layer == Some(i);
            x = if drop { a } else { a.add(x)? };
            x = self.ffn(w, x, &p, &mut rng)?;
            layers.push(x);
        }
        let hidden = self.norm(w, x, "encoder.layernorm")?;
        Ok((Packed { hidden, spans }, layers))
    }

    pub fn encode<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        seqs: &[&[TokenId]],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Packed<'t, T>> {
        Ok(self.encode_layers(w, seqs, rng)?.0)
    }

    /// Decoder stack and tied output projection; returns logits `[Σ len(tgt_in), vocab]`.
    pub fn decode<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        memory: &Packed<'t, T>,
        tgt_in: &[&[TokenId]],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<'t, T>> {
        ensure!(
            tgt_in.len() == memory.spans.len(),
            Contract,
            "{} decoder inputs for {} encoded sequences",
            tgt_in.len(),
            memory.spans.len()
        );
        let (mut x, spans) = self.embed(w, "decoder.embed_positions.weight", tgt_in)?;
        x = self.dropout(x, &mut rng)?;
        let cross: Vec<Segment> = spans
            .iter()
            .zip(&memory.spans)
            .map(|(&(qs, ql), &(ks, kl))| Segment {
                q_start: qs,
                q_len: ql,
                k_start: ks,
                k_len: kl,
            })
            .collect();
        for i in 0..self.config.n_decoder_layers {
            let p = format!("decoder.layer{i}");
            let h = self.norm(w, x, &format!("{p}.self_attn_layernorm"))?;
            x = self
                .attention(
                    w,
                    &format!("{p}.self_attn"),
                    h,
                    h,
                    self_segments(&spans),
                    true,
                    &mut rng,
                )?
                .add(x)?;
            let h = self.norm(w, x, &format!("{p}.cross_attn_layernorm"))?;
            x = self
                .attention(
                    w,
                    &format!("{p}.cross_attn"),
                    h,
                    memory.hidden,
                    cross.clone(),
                    false,
                    &mut rng,
                )?
                .add(x)?;
            x = self.ffn(w, x, &p, &mut rng)?;
        }
        let h = self.norm(w, x, "decoder.layernorm")?;
        h.linear(w.get("encoder.embed_tokens.weight"), None)
    }

    /// Mean token cross-entropy under teacher forcing.
    pub fn seq2seq_loss<'t, T: Scalar>(
        &self,
        w: &Weights<'_, 't, T>,
        batch: &[TaggedPair],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<'t, T>, Packed<'t, T>)> {
        ensure!(!batch.is_empty(), Input, "empty batch");
        let srcs: Vec<&[TokenId]> = batch.iter().map(|p| p.src.as_slice()).collect();
        let memory = self.encode(w, &srcs, rng.as_deref_mut())?;
        let tins: Vec<&[TokenId]> = batch.iter().map(|p| p.tgt_in.as_slice()).collect();
        let logits = self.decode(w, &memory, &tins, rng)?;
        let mut targets = Vec::new();
        for p in batch {
            ensure!(
                p.tgt_out.len() == p.tgt_in.len(),
                Input,
                "decoder input and output lengths differ"
            );
            targets.extend(p.tgt_out.iter().map(|&t| t as usize));
        }
        Ok((logits.cross_entropy(&targets)?, memory))
    }
}

/// How token embeddings are initialized.
#[derive(Clone, Debug)]
pub enum EmbeddingInit {
    Random,
    /// Content token `(ℓ, u)` starts at `unit_vec[u] + lang_vec[ℓ]`. Tags keep
    /// independent random rows, so mapping a tag to its language is learned.
    Structured(ToyLanguageFamily),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: ParameterRegistry,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, init: &EmbeddingInit, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterRegistry::zeros(&config.parameter_shapes())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let emb_std = 1.0 / (d as f32).sqrt();
        let names: Vec<String> = params.names().to_vec();
        for name in &names {
            let p = params.get_mut(name).unwrap();
            if name.ends_with("layernorm.weight") {
                p.data.fill(1.0);
            } else if name.contains("embed") {
                let std = if name.contains("positions") {
                    0.2 * emb_std
                } else {
                    emb_std
                };
                let dist = Normal::new(0.0, std).unwrap();
                p.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            } else if name.ends_with(".weight") {
                let (fan_out, fan_in) = (p.shape[0], p.shape[1]);
                let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
                p.data.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
            }
        }
        if let EmbeddingInit::Structured(family) = init {
            ensure!(
                family.vocab_size() == config.vocab_size,
                Config,
                "family vocabulary {} differs from model vocab_size {}",
                family.vocab_size(),
                config.vocab_size
            );
            let dist = Normal::new(0.0, emb_std).unwrap();
            let table = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
                (0..n)
                    .map(|_| (0..d).map(|_| dist.sample(rng)).collect())
                    .collect()
            };
            let concepts = table(family.n_concepts, &mut rng);
            let fillers = table(family.n_fillers, &mut rng);
            let langs = table(family.n_languages, &mut rng);
            let emb = params.get_mut("encoder.embed_tokens.weight").unwrap();
            for t in 0..config.vocab_size {
                let row = &mut emb.data[t * d..(t + 1) * d];
                let (a, b): (&[f32], &[f32]) = match family.kind(t as TokenId) {
                    Some(TokenKind::Content { lang, unit }) => match unit {
                        crate::corpus::Unit::Concept(c) => (&concepts[c], &langs[lang]),
                        crate::corpus::Unit::Filler(f) => (&fillers[f], &langs[lang]),
                    },
                    _ => continue,
                };
                row.iter_mut()
                    .zip(a.iter().zip(b))
                    .for_each(|(r, (x, y))| *r = x + y);
            }
        }
        Ok(Self { config, params })
    }

    pub fn forward(&self) -> Forward<'_> {
        Forward::new(&self.config)
    }

    /// Final encoder states `[len × d_model]` for one tagged source sequence.
    pub fn encode(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let tape = Tape::<f32>::new();
        let w = Weights::bind(&self.params, &tape, |_| false);
        let packed = self.forward().encode(&w, &[tokens], None)?;
        let out = packed.hidden.to_vec();
        Ok(out)
    }

    /// Mean token cross-entropy of a batch, without dropout.
    pub fn seq2seq_loss(&self, batch: &[TaggedPair]) -> Result<f32> {
        let tape = Tape::<f32>::new();
        let w = Weights::bind(&self.params, &tape, |_| false);
        let (loss, _) = self.forward().seq2seq_loss(&w, batch, None)?;
        let v = loss.item();
        Ok(v)
    }

    /// Next-token scorer for decoding from `src` (tagged) into the language of `tgt_tag`.
    pub fn scorer(&self, src: &[TokenId], tgt_tag: TokenId) -> Result<ModelScorer<'_>> {
        let memory = self.encode(src)?;
        Ok(ModelScorer {
            model: self,
            memory,
            src_len: src.len(),
            tgt_tag,
        })
    }

    pub fn greedy_decode(
        &self,
        src: &[TokenId],
        tgt_tag: TokenId,
        max_output_len: usize,
    ) -> Result<Decoded> {
        greedy_search(&self.scorer(src, tgt_tag)?, max_output_len, 0.0)
    }

    pub fn beam_decode(
        &self,
        src: &[TokenId],
        tgt_tag: TokenId,
        cfg: &DecodeConfig,
    ) -> Result<Decoded> {
        beam_search(&self.scorer(src, tgt_tag)?, cfg)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        write_checkpoint(path, &self.params)
    }

    /// Loads weights for `config`; names and shapes must match exactly.
    pub fn load(path: impl AsRef<std::path::Path>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        let tensors = read_checkpoint(path)?;
        let mut params = ParameterRegistry::zeros(&[])?;
        let mut by_name: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        for (name, shape, data) in tensors {
            ensure!(
                expected.iter().any(|(n, _)| *n == name),
                Format,
                "unknown parameter {name}"
            );
            ensure!(
                by_name.insert(name.clone(), (shape, data)).is_none(),
                Format,
                "duplicate parameter {name}"
            );
        }
        for (name, shape) in expected {
            let Some((s, data)) = by_name.remove(&name) else {
                return Err(crate::Error::Format(format!("missing parameter {name}")));
            };
            ensure!(
                s == shape,
                Format,
                "parameter {name} has shape {s:?}, expected {shape:?}"
            );
            params.insert(name, s, data)?;
        }
        Ok(Self { config, params })
    }
}

/// Decoder-side scorer with cached encoder states.
pub struct ModelScorer<'m> {
    model: &'m Seq2SeqModel,
    memory: Vec<f32>,
    src_len: usize,
    tgt_tag: TokenId,
}

impl StepScorer for ModelScorer<'_> {
    fn eos(&self) -> TokenId {
        self.model.config.eos_token
    }

    fn log_probs(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.model.config;
        let tape = Tape::<f32>::new();
        let w = Weights::bind(&self.model.params, &tape, |_| false);
        let d = cfg.d_model;
        let n = prefixes.len();
        let mut mem = Vec::with_capacity(n * self.memory.len());
        for _ in 0..n {
            mem.extend_from_slice(&self.memory);
        }
        let memory = Packed {
            hidden: tape.constant(mem, &[n * self.src_len, d]),
            spans: pack_spans(std::iter::repeat_n(self.src_len, n)),
        };
        let inputs: Vec<Vec<TokenId>> = prefixes
            .iter()
            .map(|p| {
                std::iter::once(self.tgt_tag)
                    .chain(p.iter().copied())
                    .collect()
            })
            .collect();
        let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let logits = self.model.forward().decode(&w, &memory, &refs, None)?;
        let data = logits.data();
        let v = cfg.vocab_size;
        let mut row_end = 0;
        let mut out = Vec::with_capacity(n);
        for inp in &inputs {
            row_end += inp.len();
            let row = &data[(row_end - 1) * v..row_end * v];
            out.push(log_softmax(row));
        }
        Ok(out)
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = mx + row.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

#[cfg(test)]
mod tests;
