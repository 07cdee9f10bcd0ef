//! CoNLL-U (dependencies) and CoNLL-2003 (entities) readers and writers.
//!
//! CoNLL-U: ten tab-separated columns, `#` comment lines, blank lines between
//! sentences. Multiword ranges (`1-2`) and empty nodes (`1.1`) are skipped.
//! Sentences read from CoNLL-U get all-`O` entity tags.
//!
//! CoNLL-2003: four whitespace-separated columns (token, POS, chunk, NER),
//! `-DOCSTART-` lines skipped. Sentences read from it get a flat tree (every
//! token attached to the first, which attaches to the root) with label `_`.

use std::fmt::Write as _;
use std::path::Path;

use super::{Corpus, DataError, Sentence};

const DOCSTART: &str = "-DOCSTART-";

pub fn read_conllu(path: impl AsRef<Path>) -> Result<Corpus, DataError> {
    let path = path.as_ref();
    parse_conllu(&std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?)
}

pub fn read_conll2003(path: impl AsRef<Path>) -> Result<Corpus, DataError> {
    let path = path.as_ref();
    parse_conll2003(&std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?)
}

fn blank(tokens: Vec<String>, pos: Vec<String>, heads: Vec<usize>, deprels: Vec<String>, bio: Vec<String>) -> Sentence {
    Sentence { tokens, pos, heads, deprels, bio }
}

pub fn parse_conllu(text: &str) -> Result<Corpus, DataError> {
    let mut out = Vec::new();
    let mut cur = blank(vec![], vec![], vec![], vec![], vec![]);
    let flush = |cur: &mut Sentence, out: &mut Vec<Sentence>| {
        if !cur.tokens.is_empty() {
            cur.bio = vec!["O".into(); cur.tokens.len()];
            out.push(std::mem::replace(cur, blank(vec![], vec![], vec![], vec![], vec![])));
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| DataError::Parse { line: line_no, message };
        if line.trim().is_empty() {
            flush(&mut cur, &mut out);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(err(format!("expected 10 tab-separated columns, found {}", cols.len())));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| err(format!("bad token id {:?}", cols[0])))?;
        if id != cur.tokens.len() + 1 {
            return Err(err(format!("token id {id} out of sequence")));
        }
        let head = cols[6].parse().map_err(|_| err(format!("bad head {:?}", cols[6])))?;
        cur.tokens.push(cols[1].to_string());
        cur.pos.push(cols[3].to_string());
        cur.heads.push(head);
        cur.deprels.push(cols[7].to_string());
    }
    flush(&mut cur, &mut out);
    Ok(Corpus::new(out))
}

pub fn parse_conll2003(text: &str) -> Result<Corpus, DataError> {
    let mut out = Vec::new();
    let mut cur = blank(vec![], vec![], vec![], vec![], vec![]);
    let flush = |cur: &mut Sentence, out: &mut Vec<Sentence>| {
        let n = cur.tokens.len();
        if n > 0 {
            cur.heads = (0..n).map(|i| if i == 0 { 0 } else { 1 }).collect();
            cur.deprels = vec!["_".into(); n];
            out.push(std::mem::replace(cur, blank(vec![], vec![], vec![], vec![], vec![])));
        }
    };
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut cur, &mut out);
            continue;
        }
        if cols[0] == DOCSTART {
            continue;
        }
        if cols.len() != 4 {
            return Err(DataError::Parse { line: i + 1, message: format!("expected 4 columns, found {}", cols.len()) });
        }
        cur.tokens.push(cols[0].to_string());
        cur.pos.push(cols[1].to_string());
        cur.bio.push(cols[3].to_string());
    }
    flush(&mut cur, &mut out);
    Ok(Corpus::new(out))
}

pub fn format_conllu(corpus: &Corpus) -> String {
    let mut s = String::new();
    for (i, sent) in corpus.sentences.iter().enumerate() {
        let _ = writeln!(s, "# sent_id = {}", i + 1);
        let _ = writeln!(s, "# text = {}", sent.tokens.join(" "));
        for j in 0..sent.len() {
            let _ = writeln!(
                s,
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_",
                j + 1,
                sent.tokens[j],
                sent.pos[j],
                sent.heads[j],
                sent.deprels[j]
            );
        }
        s.push('\n');
    }
    s
}

/// The chunk column is not modeled and is written as `O`.
pub fn format_conll2003(corpus: &Corpus) -> String {
    let mut s = format!("{DOCSTART} -X- -X- O\n\n");
    for sent in &corpus.sentences {
        for j in 0..sent.len() {
            let _ = writeln!(s, "{} {} O {}", sent.tokens[j], sent.pos[j], sent.bio[j]);
        }
        s.push('\n');
    }
    s
}

pub fn write_conllu(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, format_conllu(corpus)).map_err(|e| DataError::io(path, e))
}

pub fn write_conll2003(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, format_conll2003(corpus)).map_err(|e| DataError::io(path, e))
}
