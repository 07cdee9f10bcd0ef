use super::{named_enum, EvalSplit, HarnessError};
use crate::data::{macro_las, span_f1, tagging_accuracy, Corpus, LabelSet, Sentence, Vocab};

named_enum! {
    /// Probing tasks, ordered from lowest to highest level.
    Task {
        Pos => "pos",
        Deps => "deps",
        Ner => "ner",
    }
}

impl Task {
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Pos => "accuracy",
            Task::Deps => "macro_las",
            Task::Ner => "span_f1",
        }
    }

    fn labels_of(self, s: &Sentence) -> &[String] {
        match self {
            Task::Pos => &s.pos,
            Task::Deps => &s.deprels,
            Task::Ner => &s.bio,
        }
    }
}

/// One sentence encoded for a task: token ids, per-token label ids, and
/// gold heads (used by the parsing task only).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub heads: Vec<usize>,
}

/// A corpus encoded against a vocabulary for one task, split 85/15.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub labels: LabelSet,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl TaskData {
    /// The label inventory is collected over the whole corpus so that dev
    /// labels never fall outside it.
    pub fn new(task: Task, corpus: &Corpus, vocab: &Vocab) -> Result<Self, HarnessError> {
        if corpus.sentences.len() < 2 {
            return Err(HarnessError::Config("a task corpus needs at least two sentences".into()));
        }
        let labels = LabelSet::new(corpus.sentences.iter().flat_map(|s| task.labels_of(s).iter().map(String::as_str)));
        let encode = |c: &Corpus| -> Result<Vec<Example>, HarnessError> {
            c.sentences
                .iter()
                .map(|s| {
                    let ids = vocab.encode(&s.tokens);
                    let labels = task.labels_of(s).iter().map(|l| labels.id(l)).collect::<Result<_, _>>()?;
                    Ok(Example { ids, labels, heads: s.heads.clone() })
                })
                .collect()
        };
        let (train, dev) = corpus.split();
        let (train, dev) = (encode(&train)?, encode(&dev)?);
        if train.is_empty() || dev.is_empty() {
            return Err(HarnessError::Config("corpus too small for a train/dev split".into()));
        }
        Ok(Self { task, labels, train, dev })
    }

    pub fn split(&self, split: EvalSplit) -> &[Example] {
        match split {
            EvalSplit::Dev => &self.dev,
            EvalSplit::Train => &self.train,
        }
    }

    /// Scores predicted labels (and heads, for parsing) against `gold`.
    pub fn score(&self, gold: &[Example], labels: &[Vec<usize>], heads: &[Vec<usize>]) -> Result<f64, HarnessError> {
        let gold_labels: Vec<Vec<usize>> = gold.iter().map(|e| e.labels.clone()).collect();
        Ok(match self.task {
            Task::Pos => tagging_accuracy(labels, &gold_labels)?,
            Task::Deps => {
                let zip = |h: &[usize], l: &[usize]| -> Vec<(usize, usize)> { h.iter().copied().zip(l.iter().copied()).collect() };
                let pred: Vec<_> = heads.iter().zip(labels).map(|(h, l)| zip(h, l)).collect();
                let gold: Vec<_> = gold.iter().map(|e| zip(&e.heads, &e.labels)).collect();
                macro_las(&pred, &gold)?
            }
            Task::Ner => {
                let names = |rows: &[Vec<usize>]| -> Vec<Vec<String>> {
                    rows.iter().map(|r| r.iter().map(|&i| self.labels.label(i).to_string()).collect()).collect()
                };
                span_f1(&names(labels), &names(&gold_labels))?.f1
            }
        })
    }
}
