//! Synthetic multilingual corpus.
//!
//! A family of `N` toy languages shares one concept space. Language `ℓ`
//! renders concept `c` as token `ℓ·C + c` and filler word `f` as token
//! `N·C + ℓ·F + f`; the shared `PAD`, `EOS`, `MASK` ids and one tag per
//! language sit at the top of the vocabulary. Rendering is a bijection per
//! language, so translation is exact and the language of any content token is
//! decidable from its id alone.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub type TokenId = u32;
pub type Lang = usize;

/// Multiplicative hash constant of the salience rule.
const SALIENCE_MULTIPLIER: u64 = 2_654_435_761;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLanguageFamily {
    pub n_languages: usize,
    pub n_concepts: usize,
    pub n_fillers: usize,
}

impl Default for ToyLanguageFamily {
    fn default() -> Self {
        Self {
            n_languages: 4,
            n_concepts: 64,
            n_fillers: 32,
        }
    }
}

/// Language-independent identity of a content token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    Concept(usize),
    Filler(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Content { lang: Lang, unit: Unit },
    Pad,
    Eos,
    Mask,
    Tag(Lang),
}

/// Whether concept `c` belongs in summaries. Independent of language.
pub fn is_salient(concept: usize) -> bool {
    ((concept as u64).wrapping_mul(SALIENCE_MULTIPLIER) % (1u64 << 32)).is_multiple_of(4)
}

impl ToyLanguageFamily {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_languages >= 2, Config, "need at least 2 languages");
        ensure!(self.n_concepts >= 1, Config, "need at least one concept");
        ensure!(
            (0..self.n_concepts).any(is_salient),
            Config,
            "no concept below {} is salient",
            self.n_concepts
        );
        Ok(())
    }

    fn content_end(&self) -> usize {
        self.n_languages * (self.n_concepts + self.n_fillers)
    }

    pub fn vocab_size(&self) -> usize {
        self.content_end() + 3 + self.n_languages
    }

    pub fn pad(&self) -> TokenId {
        self.content_end() as TokenId
    }

    pub fn eos(&self) -> TokenId {
        self.content_end() as TokenId + 1
    }

    pub fn mask(&self) -> TokenId {
        self.content_end() as TokenId + 2
    }

    pub fn tag(&self, lang: Lang) -> TokenId {
        assert!(lang < self.n_languages, "language {lang} out of range");
        (self.content_end() + 3 + lang) as TokenId
    }

    pub fn render(&self, lang: Lang, unit: Unit) -> TokenId {
        assert!(lang < self.n_languages, "language {lang} out of range");
        let id = match unit {
            Unit::Concept(c) => {
                assert!(c < self.n_concepts);
                lang * self.n_concepts + c
            }
            Unit::Filler(f) => {
                assert!(f < self.n_fillers);
                self.n_languages * self.n_concepts + lang * self.n_fillers + f
            }
        };
        id as TokenId
    }

    pub fn kind(&self, token: TokenId) -> Option<TokenKind> {
        let t = token as usize;
        let concepts_end = self.n_languages * self.n_concepts;
        if t < concepts_end {
            return Some(TokenKind::Content {
                lang: t / self.n_concepts,
                unit: Unit::Concept(t % self.n_concepts),
            });
        }
        if t < self.content_end() {
            let r = t - concepts_end;
            return Some(TokenKind::Content {
                lang: r / self.n_fillers,
                unit: Unit::Filler(r % self.n_fillers),
            });
        }
        match t - self.content_end() {
            0 => Some(TokenKind::Pad),
            1 => Some(TokenKind::Eos),
            2 => Some(TokenKind::Mask),
            r if r - 3 < self.n_languages => Some(TokenKind::Tag(r - 3)),
            _ => None,
        }
    }

    /// Owning language of a content token; `None` for special tokens.
    pub fn language_of(&self, token: TokenId) -> Option<Lang> {
        match self.kind(token)? {
            TokenKind::Content { lang, .. } => Some(lang),
            _ => None,
        }
    }

    pub fn unit_of(&self, token: TokenId) -> Option<Unit> {
        match self.kind(token)? {
            TokenKind::Content { unit, .. } => Some(unit),
            _ => None,
        }
    }

    /// Renders a content token in another language; special tokens pass through.
    pub fn translate_token(&self, token: TokenId, to: Lang) -> TokenId {
        match self.unit_of(token) {
            Some(unit) => self.render(to, unit),
            None => token,
        }
    }

    pub fn translate(&self, tokens: &[TokenId], to: Lang) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|&t| self.translate_token(t, to))
            .collect()
    }

    pub fn salient_concepts(&self) -> Vec<usize> {
        (0..self.n_concepts).filter(|&c| is_salient(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentParams {
    pub min_len: usize,
    pub max_len: usize,
    pub min_salient: usize,
    pub max_salient: usize,
    /// Probability that a non-salient slot holds a filler word instead of a concept.
    pub filler_rate: f64,
}

impl Default for DocumentParams {
    fn default() -> Self {
        Self {
            min_len: 24,
            max_len: 64,
            min_salient: 3,
            max_salient: 8,
            filler_rate: 0.25,
        }
    }
}

impl DocumentParams {
    pub fn validate(&self, family: &ToyLanguageFamily) -> Result<()> {
        ensure!(
            self.min_len >= 1 && self.min_len <= self.max_len,
            Config,
            "document length range {}..={} is empty",
            self.min_len,
            self.max_len
        );
        ensure!(
            self.min_salient <= self.max_salient && self.max_salient <= self.min_len,
            Config,
            "salient range {}..={} must fit in documents of length {}",
            self.min_salient,
            self.max_salient,
            self.min_len
        );
        let available = family.salient_concepts().len();
        ensure!(
            self.max_salient <= available,
            Config,
            "{} salient concepts requested but the family has only {available}",
            self.max_salient
        );
        ensure!(
            (0.0..=1.0).contains(&self.filler_rate),
            Config,
            "filler_rate must lie in [0, 1]"
        );
        Ok(())
    }
}

/// Language-independent content of one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentState {
    pub units: Vec<Unit>,
    /// Salient concepts in order of first appearance.
    pub salient: Vec<usize>,
}

impl DocumentState {
    pub fn from_units(units: Vec<Unit>) -> Self {
        let mut salient = Vec::new();
        for u in &units {
            if let Unit::Concept(c) = *u {
                if is_salient(c) && !salient.contains(&c) {
                    salient.push(c);
                }
            }
        }
        Self { units, salient }
    }

    pub fn render(&self, family: &ToyLanguageFamily, lang: Lang) -> Vec<TokenId> {
        self.units.iter().map(|&u| family.render(lang, u)).collect()
    }

    pub fn summary(&self, family: &ToyLanguageFamily, lang: Lang) -> Vec<TokenId> {
        self.salient
            .iter()
            .map(|&c| family.render(lang, Unit::Concept(c)))
            .collect()
    }
}

/// Samples the content of one document of exactly `length` units.
pub fn generate_state(
    family: &ToyLanguageFamily,
    params: &DocumentParams,
    length: usize,
    seed: u64,
) -> Result<DocumentState> {
    params.validate(family)?;
    ensure!(
        length >= params.min_salient,
        Input,
        "document length {length} below the minimum salient count {}",
        params.min_salient
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let salient_pool = family.salient_concepts();
    let plain_pool: Vec<usize> = (0..family.n_concepts).filter(|&c| !is_salient(c)).collect();
    let k = rng.gen_range(params.min_salient..=params.max_salient.min(length));
    let chosen: Vec<usize> = salient_pool.choose_multiple(&mut rng, k).copied().collect();
    let mut slots: Vec<usize> = (0..length).collect();
    slots.shuffle(&mut rng);
    let mut salient_slots = slots[..k].to_vec();
    salient_slots.sort_unstable();
    let mut units = Vec::with_capacity(length);
    let mut next = 0;
    for pos in 0..length {
        if next < k && salient_slots[next] == pos {
            units.push(Unit::Concept(chosen[next]));
            next += 1;
        } else if plain_pool.is_empty() || rng.gen_bool(params.filler_rate) {
            units.push(Unit::Filler(rng.gen_range(0..family.n_fillers.max(1))));
        } else {
            units.push(Unit::Concept(*plain_pool.choose(&mut rng).unwrap()));
        }
    }
    Ok(DocumentState::from_units(units))
}

/// Renders a freshly sampled document in `lang`.
pub fn generate_document(
    family: &ToyLanguageFamily,
    params: &DocumentParams,
    lang: Lang,
    length: usize,
    seed: u64,
) -> Result<(Vec<TokenId>, DocumentState)> {
    ensure!(
        lang < family.n_languages,
        Input,
        "language {lang} out of range"
    );
    ensure!(
        length <= params.max_len,
        Input,
        "document length {length} exceeds max_len {}",
        params.max_len
    );
    let state = generate_state(family, params, length, seed)?;
    Ok((state.render(family, lang), state))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Summarize,
    Translate,
    Denoise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyExample {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub src_lang: Lang,
    pub tgt_lang: Lang,
    pub task: Task,
}

pub fn make_summarization_pair(
    family: &ToyLanguageFamily,
    doc: &DocumentState,
    src_lang: Lang,
    tgt_lang: Lang,
) -> Result<ToyExample> {
    ensure!(
        !doc.salient.is_empty(),
        Input,
        "document has no salient concepts; regenerate it"
    );
    Ok(ToyExample {
        src: doc.render(family, src_lang),
        tgt: doc.summary(family, tgt_lang),
        src_lang,
        tgt_lang,
        task: Task::Summarize,
    })
}

fn signature(family: &ToyLanguageFamily, tokens: &[TokenId]) -> Vec<Option<Unit>> {
    tokens.iter().map(|&t| family.unit_of(t)).collect()
}

/// Mines translation pairs from examples whose documents (or summaries) share
/// the same content in different languages. Returns both directions of every
/// match, covering document-length and summary-length pairs.
pub fn make_translation_pairs(
    family: &ToyLanguageFamily,
    dataset: &[ToyExample],
) -> Vec<ToyExample> {
    let mut groups: Vec<(Vec<Option<Unit>>, Vec<(Lang, Vec<TokenId>)>)> = Vec::new();
    let mut index: HashMap<Vec<Option<Unit>>, usize> = HashMap::new();
    let mut add = |tokens: &[TokenId], lang: Lang| {
        let sig = signature(family, tokens);
        let gi = *index.entry(sig.clone()).or_insert_with(|| {
            groups.push((sig, Vec::new()));
            groups.len() - 1
        });
        let renderings = &mut groups[gi].1;
        if !renderings.iter().any(|(l, _)| *l == lang) {
            renderings.push((lang, tokens.to_vec()));
        }
    };
    for ex in dataset {
        add(&ex.src, ex.src_lang);
        add(&ex.tgt, ex.tgt_lang);
    }
    let mut out = Vec::new();
    for (_, renderings) in &groups {
        for (a, src) in renderings {
            for (b, tgt) in renderings {
                if a != b {
                    out.push(ToyExample {
                        src: src.clone(),
                        tgt: tgt.clone(),
                        src_lang: *a,
                        tgt_lang: *b,
                        task: Task::Translate,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        log::warn!("no parallel content found; translation set is empty");
    }
    out
}

/// Masks `round(mask_rate · len)` positions of every document in short spans.
/// Source is the masked document, target the original.
pub fn make_denoising_pairs(
    family: &ToyLanguageFamily,
    documents: &[(Vec<TokenId>, Lang)],
    mask_rate: f64,
    seed: u64,
) -> Result<Vec<ToyExample>> {
    ensure!(
        mask_rate > 0.0 && mask_rate < 1.0,
        Config,
        "mask_rate must lie strictly between 0 and 1, got {mask_rate}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(documents.len());
    for (doc, lang) in documents {
        let len = doc.len();
        let target = ((mask_rate * len as f64).round() as usize).min(len);
        let mut masked = vec![false; len];
        let mut count = 0;
        while count < target {
            let start = rng.gen_range(0..len);
            let span = rng.gen_range(1..=3);
            for p in start..(start + span).min(len) {
                if count < target && !masked[p] {
                    masked[p] = true;
                    count += 1;
                }
            }
        }
        let src = doc
            .iter()
            .zip(&masked)
            .map(|(&t, &m)| if m { family.mask() } else { t })
            .collect();
        out.push(ToyExample {
            src,
            tgt: doc.clone(),
            src_lang: *lang,
            tgt_lang: *lang,
            task: Task::Denoise,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRule {
    pub min_input_units: usize,
    pub min_summary_units: usize,
}

impl Default for FilterRule {
    fn default() -> Self {
        Self {
            min_input_units: 20,
            min_summary_units: 10,
        }
    }
}

/// Drops examples whose input has no more than `min_input_units` tokens or
/// whose target has no more than `min_summary_units`.
pub fn filter_short(dataset: Vec<ToyExample>, rule: &FilterRule) -> Vec<ToyExample> {
    dataset
        .into_iter()
        .filter(|ex| ex.src.len() > rule.min_input_units && ex.tgt.len() > rule.min_summary_units)
        .collect()
}

pub fn save_jsonl(path: impl AsRef<Path>, dataset: &[ToyExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in dataset {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<ToyExample>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Shared content rendered on demand in any language of the family.
#[derive(Clone, Debug)]
pub struct ParallelCorpus {
    pub family: ToyLanguageFamily,
    pub docs: Vec<DocumentState>,
}

impl ParallelCorpus {
    /// Samples `n_docs` documents; document `i` uses seed `seed ⊕ i`-derived streams.
    pub fn generate(
        family: &ToyLanguageFamily,
        params: &DocumentParams,
        n_docs: usize,
        seed: u64,
    ) -> Result<Self> {
        family.validate()?;
        params.validate(family)?;
        let mut len_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e57);
        let mut docs = Vec::with_capacity(n_docs);
        for i in 0..n_docs {
            let length = len_rng.gen_range(params.min_len..=params.max_len);
            let doc_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64);
            docs.push(generate_state(family, params, length, doc_seed)?);
        }
        Ok(Self {
            family: family.clone(),
            docs,
        })
    }

    pub fn summarization(&self, src_lang: Lang, tgt_lang: Lang) -> Result<Vec<ToyExample>> {
        self.docs
            .iter()
            .map(|d| make_summarization_pair(&self.family, d, src_lang, tgt_lang))
            .collect()
    }

    pub fn documents(&self, lang: Lang) -> Vec<(Vec<TokenId>, Lang)> {
        self.docs
            .iter()
            .map(|d| (d.render(&self.family, lang), lang))
            .collect()
    }
}
