//! Corpus splits and training pairs for one experiment seed.

use lzlab_core::corpus::{
    make_denoising_pairs, make_translation_pairs, Lang, ParallelCorpus, ToyExample,
};
use lzlab_core::model::TaggedPair;
use lzlab_core::Result;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CorpusConfig, Direction};

/// Independent seed for a named sub-stream of a run.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

pub(crate) mod streams {
    pub const TRAIN: u64 = 1;
    pub const DEV: u64 = 2;
    pub const TEST: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const TRANSLATION: u64 = 5;
    pub const MASKING: u64 = 6;
    pub const INIT: u64 = 7;
    pub const OPTIMIZER: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const BOOTSTRAP: u64 = 10;
}

/// Parallel documents shared by every condition of one seed. Splits use
/// disjoint random streams.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub config: CorpusConfig,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    pub pretrain: ParallelCorpus,
    pub translation: ParallelCorpus,
    pub seed: u64,
}

impl ExperimentData {
    pub fn generate(config: &CorpusConfig, seed: u64) -> Result<Self> {
        let gen = |n: usize, stream: u64| {
            ParallelCorpus::generate(&config.family, &config.document, n, sub_seed(seed, stream))
        };
        Ok(Self {
            config: config.clone(),
            train: gen(config.train_docs, streams::TRAIN)?,
            dev: gen(config.dev_docs, streams::DEV)?,
            test: gen(config.test_docs, streams::TEST)?,
            pretrain: gen(config.pretrain_docs, streams::PRETRAIN)?,
            translation: gen(config.translation_docs, streams::TRANSLATION)?,
            seed,
        })
    }

    pub fn examples(corpus: &ParallelCorpus, directions: &[Direction]) -> Result<Vec<ToyExample>> {
        let mut out = Vec::new();
        for d in directions {
            out.extend(corpus.summarization(d.0, d.1)?);
        }
        Ok(out)
    }

    pub fn pairs(
        &self,
        corpus: &ParallelCorpus,
        directions: &[Direction],
    ) -> Result<Vec<TaggedPair>> {
        Ok(TaggedPair::from_examples(
            &self.config.family,
            &Self::examples(corpus, directions)?,
        ))
    }

    /// Denoising pairs over every language. The decoder starts from EOS
    /// rather than a language tag, so the output language follows the input.
    pub fn denoising(&self, corpus: &ParallelCorpus, stream: u64) -> Result<Vec<TaggedPair>> {
        let family = &self.config.family;
        let mut docs = Vec::new();
        for l in 0..family.n_languages {
            docs.extend(corpus.documents(l));
        }
        let examples = make_denoising_pairs(
            family,
            &docs,
            self.config.mask_rate,
            sub_seed(self.seed, stream),
        )?;
        Ok(examples
            .iter()
            .map(|e| {
                TaggedPair::new(
                    &e.src,
                    family.tag(e.src_lang),
                    &e.tgt,
                    family.eos(),
                    family.eos(),
                )
                .with_src_lang(e.src_lang)
            })
            .collect())
    }

    /// Translation pairs between every pair of languages, built from the
    /// documents and summaries of `corpus` rendered in each language.
    pub fn translation_pairs(&self, corpus: &ParallelCorpus) -> Result<Vec<TaggedPair>> {
        let family = &self.config.family;
        let langs: Vec<Lang> = (0..family.n_languages).collect();
        let intralingual: Vec<Direction> = langs.iter().map(|&l| Direction(l, l)).collect();
        let examples = Self::examples(corpus, &intralingual)?;
        Ok(TaggedPair::from_examples(
            family,
            &make_translation_pairs(family, &examples),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train_docs: 5,
            dev_docs: 3,
            test_docs: 3,
            pretrain_docs: 4,
            translation_docs: 2,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn splits_are_deterministic_and_distinct() {
        let a = ExperimentData::generate(&small(), 3).unwrap();
        let b = ExperimentData::generate(&small(), 3).unwrap();
        assert_eq!(a.train.docs, b.train.docs);
        assert_ne!(a.train.docs[0], a.test.docs[0]);
        assert_ne!(sub_seed(3, 1), sub_seed(3, 2));
    }

    #[test]
    fn denoising_starts_decoder_from_eos() {
        let data = ExperimentData::generate(&small(), 0).unwrap();
        let pairs = data.denoising(&data.pretrain, streams::MASKING).unwrap();
        let family = &data.config.family;
        assert_eq!(pairs.len(), 4 * family.n_languages);
        for p in &pairs {
            assert_eq!(p.tgt_in[0], family.eos());
            assert_eq!(*p.src.last().unwrap(), family.tag(p.src_lang));
        }
    }

    #[test]
    fn translation_covers_every_ordered_pair() {
        let data = ExperimentData::generate(&small(), 0).unwrap();
        let pairs = data.translation_pairs(&data.translation).unwrap();
        // Two documents and two summaries, 4·3 ordered language pairs each.
        assert_eq!(pairs.len(), 4 * 12);
    }
}
