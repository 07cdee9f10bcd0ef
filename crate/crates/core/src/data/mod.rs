//! Synthetic corpora, CoNLL file formats, vocabularies, and task metrics.

mod conll;
mod grammar;
mod metrics;
mod sentence;
mod vocab;

use std::path::Path;

pub use conll::{
    format_conll2003, format_conllu, parse_conll2003, parse_conllu, read_conll2003, read_conllu, write_conll2003,
    write_conllu,
};
pub use grammar::{
    generate_corpus, LexicalClass, Slot, SlotFiller, SyntheticGrammar, Template, ENTITY_INNER_LABEL, ENTITY_POS,
    MAX_SENTENCE_LEN, MIN_SENTENCE_LEN,
};
pub use metrics::{extract_spans, macro_las, repair_bio, span_f1, tagging_accuracy, Attachments, SpanScores};
pub use sentence::{bio_well_formed, Corpus, Sentence, TRAIN_FRACTION};
pub use vocab::{LabelSet, Vocab, MASK, PAD, ROOT, UNK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}
