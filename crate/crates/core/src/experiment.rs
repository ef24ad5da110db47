//! Glue from raw text to encoded streams and an initialized model.

use crate::checkpoint::Checkpoint;
use crate::corpus::{encode_bits, encode_stream, CharVocab, EncodedStream, WordVocab};
use crate::error::Result;
use crate::model::{Model, ModelKind};
use crate::ngram::{build_index, count_ngrams, NGramIndex};
use crate::tensor::Rng;
use crate::trainer::{init_model, TrainConfig, TrainState};

/// Vocabularies and n-gram index derived from a training text.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: TrainConfig,
    pub chars: CharVocab,
    pub words: Option<WordVocab>,
    pub index: Option<NGramIndex>,
}

impl Experiment {
    /// Builds everything the configured model needs from `train`. The
    /// n-gram index is counted on the encoded training stream (bits in bit
    /// mode).
    pub fn from_training_text(config: TrainConfig, train: &str) -> Result<Self> {
        config.validate()?;
        let chars = if config.bits {
            CharVocab::binary()
        } else {
            CharVocab::build(train)?
        };
        let words = match config.model {
            ModelKind::Mixed => Some(WordVocab::build(train, config.word_topk)?),
            _ => None,
        };
        Self::with_vocab(config, chars, words, train)
    }

    /// Like [`Self::from_training_text`] with vocabularies supplied.
    pub fn with_vocab(config: TrainConfig, chars: CharVocab, words: Option<WordVocab>, train: &str) -> Result<Self> {
        config.validate()?;
        let mut exp = Experiment {
            config,
            chars,
            words,
            index: None,
        };
        if exp.config.model == ModelKind::Cond {
            let stream = exp.encode(train)?;
            let counts = count_ngrams(&stream.chars, exp.config.n_max)?;
            exp.index = Some(build_index(&counts, exp.config.theta, exp.config.n_max)?);
        }
        Ok(exp)
    }

    /// Rebuilds the context of a saved run.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Experiment {
            config: ckpt.config.clone(),
            chars: ckpt.chars.clone(),
            words: ckpt.words.clone(),
            index: match &ckpt.model {
                Model::Cond(p) => Some(p.index.clone()),
                _ => None,
            },
        }
    }

    pub fn encode(&self, text: &str) -> Result<EncodedStream> {
        if self.config.bits {
            return Ok(encode_bits(text)?.to_stream());
        }
        match &self.words {
            Some(wv) => Ok(encode_stream(text, &self.chars, wv)),
            None => {
                let (ids, unseen) = self.chars.encode(text);
                let mut s = EncodedStream::from_chars(ids);
                s.unseen = unseen;
                Ok(s)
            }
        }
    }

    pub fn init_model(&self) -> Result<(Model, Rng)> {
        init_model(
            &self.config,
            self.chars.len(),
            self.words.as_ref().map(WordVocab::len),
            self.index.clone(),
        )
    }

    pub fn checkpoint(&self, model: Model, state: TrainState) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            chars: self.chars.clone(),
            words: self.words.clone(),
            model,
            state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_kind_gets_what_it_needs() {
        let text = "the cat sat on the mat\nthe dog sat\n";
        let base = TrainConfig {
            hidden: 4,
            word_hidden: 3,
            word_topk: 5,
            word_out: 3,
            theta: 2,
            n_max: 3,
            ..TrainConfig::default()
        };
        let plain = Experiment::from_training_text(base.clone(), text).unwrap();
        assert!(plain.words.is_none() && plain.index.is_none());

        let cond = Experiment::from_training_text(TrainConfig { model: ModelKind::Cond, ..base.clone() }, text).unwrap();
        let index = cond.index.as_ref().unwrap();
        assert!(index.contains(&[cond.chars.id('t').unwrap(), cond.chars.id('h').unwrap()]));
        let (model, _) = cond.init_model().unwrap();
        assert_eq!(model.kind(), ModelKind::Cond);

        let mixed = Experiment::from_training_text(TrainConfig { model: ModelKind::Mixed, ..base.clone() }, text).unwrap();
        assert_eq!(mixed.words.as_ref().unwrap().len(), 5);
        assert!(mixed.encode(text).unwrap().has_words());

        let bits = Experiment::from_training_text(TrainConfig { bits: true, ..base }, "ab").unwrap();
        assert_eq!(bits.chars.len(), 2);
        assert_eq!(bits.encode("ab").unwrap().len(), 16);
    }
}
