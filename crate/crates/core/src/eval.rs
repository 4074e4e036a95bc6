//! Summary metrics: ROUGE, exact language identification for toy
//! languages, bootstrap percentiles, and the translate-summarize-translate
//! pipeline baseline.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, TokenId, TokenKind, ToyLanguageFamily};
use crate::error::{ensure, Error, Result};
use crate::model::{tag_source, DecodeConfig, Seq2SeqModel};

/// Share of content tokens that must belong to the expected language.
pub const LANGUAGE_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    const ZERO: Self = Self {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_overlap(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        if overlap == 0 || hyp_total == 0 || ref_total == 0 {
            return Self::ZERO;
        }
        let precision = overlap as f64 / hyp_total as f64;
        let recall = overlap as f64 / ref_total as f64;
        Self {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// N-gram overlap with counts clipped by the reference multiplicity.
pub fn rouge_n(hyp: &[TokenId], reference: &[TokenId], n: usize) -> Result<RougeScore> {
    ensure!(n >= 1, Input, "rouge_n needs n >= 1");
    if hyp.len() < n || reference.len() < n {
        return Ok(RougeScore::ZERO);
    }
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(RougeScore::from_overlap(
        overlap,
        hyp.len() + 1 - n,
        reference.len() + 1 - n,
    ))
}

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(hyp: &[TokenId], reference: &[TokenId]) -> RougeScore {
    RougeScore::from_overlap(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Language verdict for one decoded output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageVerdict {
    Correct,
    /// At least the threshold share is in a single other language.
    OffTarget(Lang),
    Mixed,
    /// No content tokens at all.
    Empty,
}

pub fn language_verdict(
    family: &ToyLanguageFamily,
    output: &[TokenId],
    expected: Lang,
) -> LanguageVerdict {
    let mut counts = vec![0usize; family.n_languages];
    for &t in output {
        if let Some(TokenKind::Content { lang, .. }) = family.kind(t) {
            counts[lang] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return LanguageVerdict::Empty;
    }
    let share = |l: Lang| counts[l] as f64 / total as f64;
    if expected < counts.len() && share(expected) >= LANGUAGE_THRESHOLD {
        return LanguageVerdict::Correct;
    }
    match (0..counts.len()).find(|&l| l != expected && share(l) >= LANGUAGE_THRESHOLD) {
        Some(l) => LanguageVerdict::OffTarget(l),
        None => LanguageVerdict::Mixed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageAccuracy {
    pub accuracy: f64,
    pub off_target: f64,
    pub n: usize,
    /// Indices of outputs without any content token, counted incorrect.
    pub empty: Vec<usize>,
    pub verdicts: Vec<LanguageVerdict>,
}

pub fn language_accuracy(
    family: &ToyLanguageFamily,
    outputs: &[Vec<TokenId>],
    expected: &[Lang],
) -> Result<LanguageAccuracy> {
    ensure!(
        outputs.len() == expected.len(),
        Input,
        "{} outputs but {} expected languages",
        outputs.len(),
        expected.len()
    );
    let verdicts: Vec<LanguageVerdict> = outputs
        .iter()
        .zip(expected)
        .map(|(o, &l)| language_verdict(family, o, l))
        .collect();
    let n = verdicts.len();
    let frac = |pred: fn(&LanguageVerdict) -> bool| {
        if n == 0 {
            0.0
        } else {
            verdicts.iter().filter(|v| pred(v)).count() as f64 / n as f64
        }
    };
    let empty: Vec<usize> = (0..n)
        .filter(|&i| verdicts[i] == LanguageVerdict::Empty)
        .collect();
    if !empty.is_empty() {
        log::warn!("{} of {n} outputs have no content tokens", empty.len());
    }
    Ok(LanguageAccuracy {
        accuracy: frac(|v| *v == LanguageVerdict::Correct),
        off_target: frac(|v| matches!(v, LanguageVerdict::OffTarget(_))),
        n,
        empty,
        verdicts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    #[serde(rename = "p2.5")]
    pub p2_5: f64,
    pub p50: f64,
    #[serde(rename = "p97.5")]
    pub p97_5: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            seed: 0,
        }
    }
}

/// Linear interpolation between closest ranks of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percentile interval of the mean under with-replacement resampling.
pub fn bootstrap_ci(scores: &[f64], resamples: usize, seed: u64) -> Result<Percentiles> {
    ensure!(
        !scores.is_empty(),
        Input,
        "bootstrap needs at least one score"
    );
    ensure!(
        resamples >= 1,
        Input,
        "bootstrap needs at least one resample"
    );
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| scores[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok(Percentiles {
        p2_5: percentile(&means, 0.025),
        p50: percentile(&means, 0.5),
        p97_5: percentile(&means, 0.975),
    })
}

/// Corpus-level scores for one decoded test set. ROUGE is the mean of the
/// per-example F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub lang_acc: f64,
    pub off_target: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<BTreeMap<String, Percentiles>>,
}

pub const TABLE_COLUMNS: [&str; 8] = [
    "method",
    "n",
    "rouge1",
    "rouge2",
    "rougeL",
    "lang_acc",
    "off_target",
    "rougeL_ci",
];

impl EvalReport {
    pub fn compute(
        family: &ToyLanguageFamily,
        hyps: &[Vec<TokenId>],
        refs: &[Vec<TokenId>],
        tgt_langs: &[Lang],
        bootstrap: Option<BootstrapConfig>,
    ) -> Result<Self> {
        ensure!(
            hyps.len() == refs.len(),
            Input,
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        );
        ensure!(!hyps.is_empty(), Input, "cannot evaluate an empty test set");
        let mut per: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (h, r) in hyps.iter().zip(refs) {
            per.entry("rouge1").or_default().push(rouge_n(h, r, 1)?.f1);
            per.entry("rouge2").or_default().push(rouge_n(h, r, 2)?.f1);
            per.entry("rougeL").or_default().push(rouge_l(h, r).f1);
        }
        let lang = language_accuracy(family, hyps, tgt_langs)?;
        per.insert(
            "lang_acc",
            lang.verdicts
                .iter()
                .map(|v| f64::from(u8::from(*v == LanguageVerdict::Correct)))
                .collect(),
        );
        let ci = match bootstrap {
            None => None,
            Some(b) => Some(
                per.iter()
                    .map(|(k, v)| Ok((k.to_string(), bootstrap_ci(v, b.resamples, b.seed)?)))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            rouge1: mean(&per["rouge1"]),
            rouge2: mean(&per["rouge2"]),
            rouge_l: mean(&per["rougeL"]),
            lang_acc: lang.accuracy,
            off_target: lang.off_target,
            n: hyps.len(),
            ci,
        })
    }
}

/// CSV table with one row per method, columns as in [`TABLE_COLUMNS`].
pub fn eval_table_csv(rows: &[(String, EvalReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(TABLE_COLUMNS).map_err(io)?;
    for (method, r) in rows {
        let ci =
            r.ci.as_ref()
                .and_then(|c| c.get("rougeL"))
                .map(|p| format!("{:.4}/{:.4}/{:.4}", p.p2_5, p.p50, p.p97_5))
                .unwrap_or_default();
        w.write_record([
            method.clone(),
            r.n.to_string(),
            format!("{:.4}", r.rouge1),
            format!("{:.4}", r.rouge2),
            format!("{:.4}", r.rouge_l),
            format!("{:.4}", r.lang_acc),
            format!("{:.4}", r.off_target),
            ci,
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Anything that maps a bare source sequence in one language to a bare
/// output sequence in another.
pub trait Generator {
    fn generate(&self, src: &[TokenId], src_lang: Lang, tgt_lang: Lang) -> Result<Vec<TokenId>>;
}

/// Beam-search decoding with a trained model.
pub struct ModelGenerator<'m> {
    pub model: &'m Seq2SeqModel,
    pub family: &'m ToyLanguageFamily,
    pub decode: DecodeConfig,
}

impl Generator for ModelGenerator<'_> {
    fn generate(&self, src: &[TokenId], src_lang: Lang, tgt_lang: Lang) -> Result<Vec<TokenId>> {
        let tagged = tag_source(self.family, src, src_lang);
        Ok(self
            .model
            .beam_decode(&tagged, self.family.tag(tgt_lang), &self.decode)?
            .tokens)
    }
}

/// Exact token-level translator of the toy family.
pub struct OracleTranslator<'f>(pub &'f ToyLanguageFamily);

impl Generator for OracleTranslator<'_> {
    fn generate(&self, src: &[TokenId], _src_lang: Lang, tgt_lang: Lang) -> Result<Vec<TokenId>> {
        Ok(self.0.translate(src, tgt_lang))
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Translate into `pivot`, summarize there, translate into `tgt_lang`.
/// Translation steps between identical languages are skipped.
pub fn pipeline_summarize(
    translator: &dyn Generator,
    summarizer: &dyn Generator,
    source: &[TokenId],
    src_lang: Lang,
    tgt_lang: Lang,
    pivot: Lang,
) -> Result<Vec<TokenId>> {
    let pivot_src = if src_lang == pivot {
        source.to_vec()
    } else {
        stage(
            "translate-to-pivot",
            translator.generate(source, src_lang, pivot),
        )?
    };
    let summary = stage("summarize", summarizer.generate(&pivot_src, pivot, pivot))?;
    if tgt_lang == pivot {
        Ok(summary)
    } else {
        stage(
            "translate-from-pivot",
            translator.generate(&summary, pivot, tgt_lang),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_document, DocumentParams, Unit};
    use proptest::prelude::*;

    fn fam() -> ToyLanguageFamily {
        ToyLanguageFamily::default()
    }

    #[test]
    fn rouge_hand_examples() {
        let (a, b, c, d, x) = (1, 2, 3, 4, 9);
        assert_eq!(rouge_n(&[a, b, c], &[a, b, c], 1).unwrap().f1, 1.0);
        let r2 = rouge_n(&[a, b, c, d], &[a, b, c], 2).unwrap();
        assert_eq!(r2.recall, 1.0);
        assert!((r2.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r2.f1 - 0.8).abs() < 1e-12);
        assert_eq!(rouge_n(&[a, b], &[c, d], 1).unwrap().f1, 0.0);
        let l = rouge_l(&[a, b, c], &[a, x, c]);
        for v in [l.precision, l.recall, l.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(rouge_l(&[a, x, c], &[a, x, c]).f1, 1.0);
    }

    #[test]
    fn rouge_clips_by_reference_count() {
        // hyp unigrams a×3, reference has a once.
        let r = rouge_n(&[1, 1, 1], &[1, 2], 1).unwrap();
        assert!((r.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.recall, 0.5);
    }

    #[test]
    fn empty_sides_score_zero() {
        assert_eq!(rouge_n(&[], &[1], 1).unwrap(), RougeScore::ZERO);
        assert_eq!(rouge_l(&[1], &[]), RougeScore::ZERO);
        assert!(rouge_n(&[1], &[1], 0).is_err());
    }

    fn is_subsequence(sub: &[TokenId], seq: &[TokenId]) -> bool {
        let mut it = seq.iter();
        sub.iter().all(|s| it.any(|t| t == s))
    }

    /// Longest subsequence of `a` that is also a subsequence of `b`, by
    /// enumerating all 2^|a| index subsets.
    fn brute_lcs(a: &[TokenId], b: &[TokenId]) -> usize {
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let sub: Vec<TokenId> = (0..a.len())
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| a[i])
                    .collect();
                is_subsequence(&sub, b).then_some(sub.len())
            })
            .max()
            .unwrap()
    }

    fn all_sequences(max_len: usize) -> Vec<Vec<TokenId>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            frontier = frontier
                .iter()
                .flat_map(|s: &Vec<TokenId>| {
                    (0..3).map(move |t| {
                        let mut s = s.clone();
                        s.push(t);
                        s
                    })
                })
                .collect();
            out.extend(frontier.iter().cloned());
        }
        out
    }

    #[test]
    fn lcs_matches_exhaustive_oracle_on_short_pairs() {
        // Every pair up to length 5 exhaustively.
        let seqs = all_sequences(5);
        for a in &seqs {
            for b in &seqs {
                assert_eq!(lcs_len(a, b), brute_lcs(a, b), "{a:?} {b:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn lcs_matches_exhaustive_oracle_up_to_eight(
            a in prop::collection::vec(0u32..3, 0..=8),
            b in prop::collection::vec(0u32..3, 0..=8),
        ) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn rouge_invariant_under_relabeling(
            a in prop::collection::vec(0u32..4, 0..10),
            b in prop::collection::vec(0u32..4, 0..10),
            perm in Just([0u32, 1, 2, 3]).prop_shuffle(),
        ) {
            let map = |s: &[u32]| s.iter().map(|&t| perm[t as usize] + 100).collect::<Vec<_>>();
            let (ma, mb) = (map(&a), map(&b));
            prop_assert_eq!(rouge_l(&a, &b), rouge_l(&ma, &mb));
            for n in 1..=2 {
                prop_assert_eq!(rouge_n(&a, &b, n).unwrap(), rouge_n(&ma, &mb, n).unwrap());
            }
        }

        #[test]
        fn self_overlap_is_perfect(x in prop::collection::vec(0u32..5, 2..12)) {
            prop_assert_eq!(rouge_n(&x, &x, 1).unwrap().f1, 1.0);
            prop_assert_eq!(rouge_n(&x, &x, 2).unwrap().f1, 1.0);
            prop_assert_eq!(rouge_l(&x, &x).f1, 1.0);
        }

        #[test]
        fn bootstrap_percentiles_are_ordered(
            scores in prop::collection::vec(0.0f64..1.0, 1..30),
            seed in any::<u64>(),
        ) {
            let p = bootstrap_ci(&scores, 200, seed).unwrap();
            prop_assert!(p.p2_5 <= p.p50 && p.p50 <= p.p97_5);
        }
    }

    #[test]
    fn bootstrap_constant_input_is_exact() {
        let p = bootstrap_ci(&[0.5; 17], 1000, 3).unwrap();
        assert_eq!(
            p,
            Percentiles {
                p2_5: 0.5,
                p50: 0.5,
                p97_5: 0.5
            }
        );
    }

    #[test]
    fn bootstrap_two_point_median() {
        let p = bootstrap_ci(&[0.0, 1.0], 10_000, 11).unwrap();
        assert!((0.45..=0.55).contains(&p.p50), "{p:?}");
        assert!(bootstrap_ci(&[], 10, 0).is_err());
        assert!(bootstrap_ci(&[1.0], 0, 0).is_err());
        assert_eq!(
            bootstrap_ci(&[0.2, 0.9], 50, 7).unwrap(),
            bootstrap_ci(&[0.2, 0.9], 50, 7).unwrap()
        );
    }

    fn in_lang(f: &ToyLanguageFamily, l: Lang, concepts: &[usize]) -> Vec<TokenId> {
        concepts
            .iter()
            .map(|&c| f.render(l, Unit::Concept(c)))
            .collect()
    }

    #[test]
    fn language_accuracy_rules() {
        let f = fam();
        let pure = vec![in_lang(&f, 1, &[0, 4, 8]), in_lang(&f, 2, &[1, 2])];
        assert_eq!(language_accuracy(&f, &pure, &[1, 2]).unwrap().accuracy, 1.0);

        let wrong = vec![in_lang(&f, 0, &[0, 4]), in_lang(&f, 0, &[8])];
        let r = language_accuracy(&f, &wrong, &[1, 3]).unwrap();
        assert_eq!((r.accuracy, r.off_target), (0.0, 1.0));

        let mut mixed = in_lang(&f, 1, &[0, 4]);
        mixed.extend(in_lang(&f, 2, &[8, 12]));
        assert_eq!(language_verdict(&f, &mixed, 1), LanguageVerdict::Mixed);

        // Four of five content tokens meet the threshold; specials are ignored.
        let mut mostly = in_lang(&f, 3, &[0, 4, 8, 12]);
        mostly.extend(in_lang(&f, 0, &[16]));
        mostly.extend([f.eos(), f.tag(0), f.pad()]);
        assert_eq!(language_verdict(&f, &mostly, 3), LanguageVerdict::Correct);
    }

    #[test]
    fn empty_outputs_are_flagged_incorrect() {
        let f = fam();
        let outs = vec![vec![], vec![f.eos()], in_lang(&f, 0, &[4])];
        let r = language_accuracy(&f, &outs, &[0, 0, 0]).unwrap();
        assert_eq!(r.empty, vec![0, 1]);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!(language_accuracy(&f, &outs, &[0]).is_err());
    }

    #[test]
    fn report_and_table() {
        let f = fam();
        let refs = vec![in_lang(&f, 0, &[0, 4, 8]), in_lang(&f, 1, &[12, 16])];
        let r = EvalReport::compute(&f, &refs, &refs, &[0, 1], None).unwrap();
        assert_eq!(
            (r.rouge1, r.rouge2, r.rouge_l, r.lang_acc, r.n),
            (1.0, 1.0, 1.0, 1.0, 2)
        );
        assert!(r.ci.is_none());
        let with_ci =
            EvalReport::compute(&f, &refs, &refs, &[0, 1], Some(BootstrapConfig::default()))
                .unwrap();
        assert_eq!(with_ci.ci.as_ref().unwrap()["rougeL"].p50, 1.0);
        let json = serde_json::to_value(&with_ci).unwrap();
        assert!(json.get("rougeL").is_some() && json["ci"]["rouge1"].get("p97.5").is_some());
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, with_ci);

        let csv = eval_table_csv(&[("baseline".into(), r)]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TABLE_COLUMNS.join(","));
        assert!(lines.next().unwrap().starts_with("baseline,2,1.0000,"));
    }

    /// Exact summarizer: keeps salient concepts, renders them in the target language.
    struct OracleSummarizer<'f>(&'f ToyLanguageFamily);

    impl Generator for OracleSummarizer<'_> {
        fn generate(&self, src: &[TokenId], _: Lang, tgt: Lang) -> Result<Vec<TokenId>> {
            Ok(src
                .iter()
                .filter_map(|&t| match self.0.unit_of(t) {
                    Some(Unit::Concept(c)) if crate::corpus::is_salient(c) => {
                        Some(self.0.render(tgt, Unit::Concept(c)))
                    }
                    _ => None,
                })
                .collect())
        }
    }

    /// Oracle translation that drops every third token.
    struct LossyTranslator<'f>(&'f ToyLanguageFamily);

    impl Generator for LossyTranslator<'_> {
        fn generate(&self, src: &[TokenId], _: Lang, tgt: Lang) -> Result<Vec<TokenId>> {
            Ok(src
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 3 != 2)
                .map(|(_, &t)| self.0.translate_token(t, tgt))
                .collect())
        }
    }

    struct Failing;

    impl Generator for Failing {
        fn generate(&self, _: &[TokenId], _: Lang, _: Lang) -> Result<Vec<TokenId>> {
            Err(Error::Input("boom".into()))
        }
    }

    #[test]
    fn pipeline_with_oracles_matches_direct() {
        let f = fam();
        let params = DocumentParams::default();
        for seed in 0..10 {
            let (doc, state) = generate_document(&f, &params, 2, 30, seed).unwrap();
            let direct = OracleSummarizer(&f).generate(&doc, 2, 1).unwrap();
            let piped =
                pipeline_summarize(&OracleTranslator(&f), &OracleSummarizer(&f), &doc, 2, 1, 0)
                    .unwrap();
            assert_eq!(piped, direct);
            assert_eq!(piped, state.summary(&f, 1));
            let same =
                pipeline_summarize(&OracleTranslator(&f), &OracleSummarizer(&f), &doc, 2, 2, 2)
                    .unwrap();
            assert_eq!(same, state.summary(&f, 2));
        }
    }

    #[test]
    fn noisy_translation_degrades_the_pipeline() {
        let f = fam();
        let params = DocumentParams::default();
        let (mut exact, mut noisy) = (0.0, 0.0);
        for seed in 0..20 {
            let (doc, state) = generate_document(&f, &params, 3, 40, seed).unwrap();
            let reference = state.summary(&f, 1);
            let a = pipeline_summarize(&OracleTranslator(&f), &OracleSummarizer(&f), &doc, 3, 1, 0)
                .unwrap();
            let b = pipeline_summarize(&LossyTranslator(&f), &OracleSummarizer(&f), &doc, 3, 1, 0)
                .unwrap();
            exact += rouge_l(&a, &reference).f1;
            noisy += rouge_l(&b, &reference).f1;
        }
        assert!(noisy < exact, "{noisy} vs {exact}");
    }

    #[test]
    fn pipeline_failures_name_the_stage() {
        let f = fam();
        let err = pipeline_summarize(&Failing, &OracleSummarizer(&f), &[0], 1, 2, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::Stage {
                stage: "translate-to-pivot",
                ..
            }
        ));
        let err = pipeline_summarize(&OracleTranslator(&f), &Failing, &[0], 1, 2, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::Stage {
                stage: "summarize",
                ..
            }
        ));
    }
}
