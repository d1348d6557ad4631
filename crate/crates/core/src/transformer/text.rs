//! Text conditioning: a pluggable encoder interface and an order-free
//! bag-of-words stub with a trainable embedding table.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{device, ParamStore};
use crate::schema::{AttributeLabel, AttributeSchema};

pub trait TextEncoder {
    /// `(prompts.len(), width)` embeddings; identical texts give identical rows.
    fn encode(&self, prompts: &[&str]) -> Result<Tensor>;
    fn width(&self) -> usize;
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Closed vocabulary built from corpus texts; id 0 is the shared unknown word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut all: Vec<String> = texts.into_iter().flat_map(words).collect();
        all.sort();
        all.dedup();
        Self {
            words: all.into_iter().enumerate().map(|(i, w)| (w, i + 1)).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn ids(&self, text: &str) -> Result<Vec<usize>> {
        let ws = words(text);
        if ws.is_empty() {
            return Err(Error::Parameter("text prompt is empty".into()));
        }
        Ok(ws.iter().map(|w| self.words.get(w).copied().unwrap_or(0)).collect())
    }
}

/// Mean of learned word embeddings.
#[derive(Clone)]
pub struct BagOfWords {
    pub vocab: Vocabulary,
    pub table: Var,
    width: usize,
}

impl BagOfWords {
    pub fn new(ps: &mut ParamStore, prefix: &str, vocab: Vocabulary, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let table = ps.normal(&format!("{prefix}.table"), &[vocab.size(), width], 1.0, rng)?;
        Ok(Self { vocab, table, width })
    }
}

impl TextEncoder for BagOfWords {
    fn encode(&self, prompts: &[&str]) -> Result<Tensor> {
        let v = self.vocab.size();
        let mut avg = vec![0f32; prompts.len() * v];
        for (r, p) in prompts.iter().enumerate() {
            let ids = self.vocab.ids(p)?;
            let share = 1.0 / ids.len() as f32;
            for id in ids {
                avg[r * v + id] += share;
            }
        }
        let avg = Tensor::from_vec(avg, (prompts.len(), v), &device())?;
        Ok(avg.matmul(self.table.as_tensor())?)
    }

    fn width(&self) -> usize {
        self.width
    }
}

/// Where the canonical attribute phrase is appended to prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrInText {
    #[default]
    Off,
    Train,
    Test,
    Both,
}

impl std::str::FromStr for AttrInText {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("attr-in-text mode '{other}' is not one of off, train, test, both"))),
        }
    }
}

impl AttrInText {
    pub fn at_train(self) -> bool {
        matches!(self, Self::Train | Self::Both)
    }

    pub fn at_test(self) -> bool {
        matches!(self, Self::Test | Self::Both)
    }
}

pub fn with_attribute_phrase(text: &str, schema: &AttributeSchema, label: &AttributeLabel) -> Result<String> {
    Ok(format!("{text} {}", schema.phrase(label)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn stub() -> BagOfWords {
        let vocab = Vocabulary::build(["a person walks", "a person jumps high"]);
        let mut ps = ParamStore::new();
        BagOfWords::new(&mut ps, "text", vocab, 8, &mut stream_rng(0, 0)).unwrap()
    }

    fn row(t: &Tensor, i: usize) -> Vec<f32> {
        t.get(i).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn bag_of_words_examples() {
        let enc = stub();
        let out = enc.encode(&["walks", "walks walks", "person a walks", "a person walks"]).unwrap();
        let walk_id = enc.vocab.words["walks"];
        let table_row: Vec<f32> = enc.table.as_tensor().get(walk_id).unwrap().to_vec1().unwrap();
        assert_eq!(row(&out, 0), table_row);
        assert_eq!(row(&out, 1), row(&out, 0));
        assert_eq!(row(&out, 2), row(&out, 3));
    }

    #[test]
    fn unknown_words_share_one_embedding_and_empty_is_rejected() {
        let enc = stub();
        let out = enc.encode(&["skips", "Swims"]).unwrap();
        assert_eq!(row(&out, 0), row(&out, 1));
        assert_eq!(enc.vocab.ids("WALKS").unwrap(), enc.vocab.ids("walks").unwrap());
        assert!(matches!(enc.encode(&["   "]), Err(Error::Parameter(_))));
    }

    #[test]
    fn attribute_phrase_modes() {
        let schema = AttributeSchema::default();
        let p = with_attribute_phrase("a person walks", &schema, &AttributeLabel::age_gender(1, 1)).unwrap();
        assert_eq!(p, "a person walks a 19-35-year-old female");
        assert!("both".parse::<AttrInText>().unwrap().at_train());
        assert!(!"test".parse::<AttrInText>().unwrap().at_train());
        assert!("sometimes".parse::<AttrInText>().is_err());
    }
}
