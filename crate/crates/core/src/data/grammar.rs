//! Template grammar that generates sentences with gold POS tags, dependency
//! trees, and BIO entity tags. See `data/grammar.txt` for the file syntax.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Corpus, DataError, Sentence};
use crate::autodiff::RngState;

/// Inclusive sentence-length bounds every template must respect.
pub const MIN_SENTENCE_LEN: usize = 5;
pub const MAX_SENTENCE_LEN: usize = 15;

/// Tag given to every entity token.
pub const ENTITY_POS: &str = "PROPN";
/// Relation attaching non-initial entity tokens to the first one.
pub const ENTITY_INNER_LABEL: &str = "flat";

const SHIPPED: &str = include_str!("../../data/grammar.txt");

#[derive(Clone, Debug, PartialEq)]
pub struct LexicalClass {
    pub pos: String,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SlotFiller {
    Word(String),
    Entity(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub filler: SlotFiller,
    /// 1-based slot index of the governor, 0 for the root.
    pub head: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub weight: f64,
    pub slots: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGrammar {
    pub lexicon: BTreeMap<String, LexicalClass>,
    /// Entity type → names, each a token list.
    pub entities: BTreeMap<String, Vec<Vec<String>>>,
    pub templates: Vec<Template>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Lexicon,
    Entities,
    Templates,
}

impl SyntheticGrammar {
    /// The grammar bundled with the crate.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED).expect("bundled grammar is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut section = Section::None;
        let mut lexicon = BTreeMap::new();
        let mut entities: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        let mut templates = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| DataError::Parse { line: line_no, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                section = match line {
                    "[LEXICON]" => Section::Lexicon,
                    "[ENTITIES]" => Section::Entities,
                    "[TEMPLATES]" => Section::Templates,
                    other => return Err(err(format!("unknown section {other}"))),
                };
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match section {
                Section::None => return Err(err("content before any section header".into())),
                Section::Lexicon => {
                    if fields.len() < 3 {
                        return Err(err("lexicon line needs class, tag, and at least one word".into()));
                    }
                    let class = LexicalClass {
                        pos: fields[1].to_string(),
                        words: fields[2..].iter().map(|w| w.to_string()).collect(),
                    };
                    if lexicon.insert(fields[0].to_string(), class).is_some() {
                        return Err(err(format!("duplicate class {}", fields[0])));
                    }
                }
                Section::Entities => {
                    let (ty, rest) = line.split_once(char::is_whitespace).ok_or_else(|| err("entity line needs a type and names".into()))?;
                    let names: Vec<Vec<String>> = rest
                        .split('|')
                        .map(|n| n.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                        .collect();
                    if names.iter().any(Vec::is_empty) {
                        return Err(err("empty entity name".into()));
                    }
                    entities.entry(ty.to_string()).or_default().extend(names);
                }
                Section::Templates => {
                    let weight: f64 = fields[0].parse().map_err(|_| err(format!("bad weight {:?}", fields[0])))?;
                    if !(weight > 0.0 && weight.is_finite()) {
                        return Err(err(format!("weight must be positive, got {weight}")));
                    }
                    let slots = fields[1..].iter().map(|s| parse_slot(s).map_err(&err)).collect::<Result<Vec<_>, _>>()?;
                    templates.push(Template { weight, slots });
                }
            }
        }
        let grammar = Self { lexicon, entities, templates };
        grammar.check()?;
        Ok(grammar)
    }

    /// Every template must reference known classes and entity types, form a
    /// tree, and stay within the sentence-length bounds.
    fn check(&self) -> Result<(), DataError> {
        if self.templates.is_empty() {
            return Err(DataError::Invalid("grammar has no templates".into()));
        }
        for (ti, t) in self.templates.iter().enumerate() {
            let bad = |m: String| DataError::Invalid(format!("template {}: {m}", ti + 1));
            for s in &t.slots {
                match &s.filler {
                    SlotFiller::Word(c) if !self.lexicon.contains_key(c) => return Err(bad(format!("unknown class {c}"))),
                    SlotFiller::Entity(e) if !self.entities.contains_key(e) => {
                        return Err(bad(format!("unknown entity type {e}")))
                    }
                    _ => {}
                }
                if s.head > t.slots.len() {
                    return Err(bad(format!("head {} out of range", s.head)));
                }
            }
            let (lo, hi) = self.length_range(t);
            if lo < MIN_SENTENCE_LEN || hi > MAX_SENTENCE_LEN {
                return Err(bad(format!("lengths {lo}..={hi} outside {MIN_SENTENCE_LEN}..={MAX_SENTENCE_LEN}")));
            }
            // Structure does not depend on the words drawn, so one instance
            // validates the whole template.
            let fill: Vec<usize> = vec![0; t.slots.len()];
            self.realize(t, &fill).validate().map_err(|e| bad(e.to_string()))?;
        }
        Ok(())
    }

    fn length_range(&self, t: &Template) -> (usize, usize) {
        t.slots.iter().fold((0, 0), |(lo, hi), s| match &s.filler {
            SlotFiller::Word(_) => (lo + 1, hi + 1),
            SlotFiller::Entity(e) => {
                let lens = self.entities[e].iter().map(Vec::len);
                (lo + lens.clone().min().unwrap_or(1), hi + lens.max().unwrap_or(1))
            }
        })
    }

    fn choices(&self, slot: &Slot) -> usize {
        match &slot.filler {
            SlotFiller::Word(c) => self.lexicon[c].words.len(),
            SlotFiller::Entity(e) => self.entities[e].len(),
        }
    }

    /// Builds the sentence for `template` with choice `fill[i]` at slot `i`.
    fn realize(&self, template: &Template, fill: &[usize]) -> Sentence {
        let mut start = Vec::with_capacity(template.slots.len());
        let mut pos = 1;
        for (s, &f) in template.slots.iter().zip(fill) {
            start.push(pos);
            pos += match &s.filler {
                SlotFiller::Word(_) => 1,
                SlotFiller::Entity(e) => self.entities[e][f].len(),
            };
        }
        let mut out = Sentence { tokens: vec![], pos: vec![], heads: vec![], deprels: vec![], bio: vec![] };
        for (i, (s, &f)) in template.slots.iter().zip(fill).enumerate() {
            let head = if s.head == 0 { 0 } else { start[s.head - 1] };
            match &s.filler {
                SlotFiller::Word(c) => {
                    let class = &self.lexicon[c];
                    out.tokens.push(class.words[f].clone());
                    out.pos.push(class.pos.clone());
                    out.heads.push(head);
                    out.deprels.push(s.label.clone());
                    out.bio.push("O".into());
                }
                SlotFiller::Entity(e) => {
                    for (k, w) in self.entities[e][f].iter().enumerate() {
                        out.tokens.push(w.clone());
                        out.pos.push(ENTITY_POS.into());
                        if k == 0 {
                            out.heads.push(head);
                            out.deprels.push(s.label.clone());
                            out.bio.push(format!("B-{e}"));
                        } else {
                            out.heads.push(start[i]);
                            out.deprels.push(ENTITY_INNER_LABEL.into());
                            out.bio.push(format!("I-{e}"));
                        }
                    }
                }
            }
        }
        out
    }

    /// Draws one sentence: a template proportional to weight, then a uniform
    /// choice for each slot.
    pub fn sample(&self, rng: &mut RngState) -> Sentence {
        let total: f64 = self.templates.iter().map(|t| t.weight).sum();
        let mut x = rng.uniform() * total;
        let mut chosen = self.templates.last().expect("non-empty");
        for t in &self.templates {
            if x < t.weight {
                chosen = t;
                break;
            }
            x -= t.weight;
        }
        let fill: Vec<usize> = chosen.slots.iter().map(|s| rng.below(self.choices(s))).collect();
        self.realize(chosen, &fill)
    }

    /// Long-run fraction of tokens carrying each POS tag, computed from the
    /// template weights and mean entity lengths.
    pub fn expected_pos_distribution(&self) -> BTreeMap<String, f64> {
        let total_w: f64 = self.templates.iter().map(|t| t.weight).sum();
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        let mut length = 0.0;
        for t in &self.templates {
            let p = t.weight / total_w;
            for s in &t.slots {
                let (tag, n) = match &s.filler {
                    SlotFiller::Word(c) => (self.lexicon[c].pos.clone(), 1.0),
                    SlotFiller::Entity(e) => {
                        let names = &self.entities[e];
                        (ENTITY_POS.to_string(), names.iter().map(Vec::len).sum::<usize>() as f64 / names.len() as f64)
                    }
                };
                *counts.entry(tag).or_default() += p * n;
                length += p * n;
            }
        }
        counts.values_mut().for_each(|v| *v /= length);
        counts
    }
}

fn parse_slot(s: &str) -> Result<Slot, String> {
    let (filler, rest) = s.split_once('@').ok_or_else(|| format!("slot {s:?} lacks '@'"))?;
    let (head, label) = rest.split_once(':').ok_or_else(|| format!("slot {s:?} lacks ':'"))?;
    let head = head.parse().map_err(|_| format!("slot {s:?} has a bad head"))?;
    if label.is_empty() {
        return Err(format!("slot {s:?} has an empty label"));
    }
    let filler = match filler.strip_prefix("ENT:") {
        Some(ty) => SlotFiller::Entity(ty.to_string()),
        None => SlotFiller::Word(filler.to_string()),
    };
    Ok(Slot { filler, head, label: label.to_string() })
}

/// Generates `n` sentences, deterministic in `rng`'s seed and stream.
pub fn generate_corpus(grammar: &SyntheticGrammar, n: usize, rng: &mut RngState) -> Result<Corpus, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("corpus size must be at least 1".into()));
    }
    Ok(Corpus::new((0..n).map(|_| grammar.sample(rng)).collect()))
}
