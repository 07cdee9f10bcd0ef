use super::DataError;

/// One annotated sentence. All annotation vectors are aligned with `tokens`;
/// `heads` are 0 for the root and 1-based token positions otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub heads: Vec<usize>,
    pub deprels: Vec<String>,
    pub bio: Vec<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks alignment, head range, acyclicity with a single root
    /// attachment, and BIO well-formedness.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.tokens.len();
        let bad = |m: String| Err(DataError::Invalid(m));
        if n == 0 {
            return bad("empty sentence".into());
        }
        if [self.pos.len(), self.heads.len(), self.deprels.len(), self.bio.len()].iter().any(|&l| l != n) {
            return bad(format!("annotation lengths differ from {n} tokens"));
        }
        if let Some(h) = self.heads.iter().find(|&&h| h > n) {
            return bad(format!("head {h} out of range"));
        }
        let roots = self.heads.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return bad(format!("{roots} root attachments"));
        }
        for start in 1..=n {
            let mut cur = start;
            for _ in 0..=n {
                cur = self.heads[cur - 1];
                if cur == 0 {
                    break;
                }
            }
            if cur != 0 {
                return bad(format!("cycle through token {start}"));
            }
        }
        if !bio_well_formed(&self.bio) {
            return bad(format!("ill-formed BIO {:?}", self.bio));
        }
        Ok(())
    }
}

/// True when no `I-X` follows `O`, a different type, or the sentence start.
pub fn bio_well_formed(tags: &[String]) -> bool {
    let mut prev: Option<&str> = None;
    for t in tags {
        if let Some(ty) = t.strip_prefix("I-") {
            if prev != Some(ty) {
                return false;
            }
        } else if t != "O" && !t.starts_with("B-") {
            return false;
        }
        prev = t.strip_prefix("B-").or_else(|| t.strip_prefix("I-"));
    }
    true
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

/// Fraction of sentences (by index) that form the training split.
pub const TRAIN_FRACTION: f64 = 0.85;

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        Self { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// First 85% of sentences train, the rest are held out.
    pub fn split(&self) -> (Corpus, Corpus) {
        let cut = ((self.sentences.len() as f64) * TRAIN_FRACTION).round() as usize;
        let cut = cut.min(self.sentences.len());
        (Corpus::new(self.sentences[..cut].to_vec()), Corpus::new(self.sentences[cut..].to_vec()))
    }

    /// Copies BIO tags from a token-aligned NER corpus.
    pub fn merge_ner(&mut self, ner: &Corpus) -> Result<(), DataError> {
        if ner.len() != self.len() {
            return Err(DataError::Invalid(format!("{} NER sentences for {} parsed sentences", ner.len(), self.len())));
        }
        for (i, (s, n)) in self.sentences.iter_mut().zip(&ner.sentences).enumerate() {
            if s.tokens != n.tokens {
                return Err(DataError::Invalid(format!("sentence {} tokens differ between files", i + 1)));
            }
            s.bio = n.bio.clone();
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}
