use std::collections::{BTreeSet, HashMap};

use super::{Corpus, DataError};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const ROOT: &str = "[ROOT]";
const RESERVED: [&str; 4] = [PAD, UNK, MASK, ROOT];

/// Token ↔ id map. Ids 0..4 are the reserved tokens; the rest follow in
/// sorted order so a vocabulary is a pure function of its token set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let words: BTreeSet<&str> = corpus.sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)).collect();
        Self::from_tokens(RESERVED.iter().copied().chain(words.into_iter().filter(|w| !RESERVED.contains(w))))
            .expect("reserved tokens present")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Self, DataError> {
        let tokens: Vec<String> = tokens.into_iter().map(str::to_string).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(DataError::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if ids.get(*r) != Some(&i) {
                return Err(DataError::Invalid(format!("reserved token {r} must have id {i}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(self.unk())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn mask(&self) -> usize {
        2
    }

    pub fn root(&self) -> usize {
        3
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < RESERVED.len()
    }
}

/// Sorted label inventory for a classification target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    ids: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let labels: Vec<String> = labels.into_iter().collect::<BTreeSet<_>>().into_iter().map(str::to_string).collect();
        let ids = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, ids }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Result<usize, DataError> {
        self.ids.get(label).copied().ok_or_else(|| DataError::Invalid(format!("unknown label {label:?}")))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }
}
