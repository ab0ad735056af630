use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{KgSource, KnowledgeGraph, KnowledgeTriple, DONE_MANNER, HAS_PROPERTY, RELATED_TO};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PosTag {
    Noun,
    Adjective,
    Verb,
    Adverb,
    Other,
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noun" => PosTag::Noun,
            "adjective" => PosTag::Adjective,
            "verb" => PosTag::Verb,
            "adverb" => PosTag::Adverb,
            "other" => PosTag::Other,
            _ => return Err(Error::Data(format!("unknown POS tag {s:?}"))),
        })
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosTag::Noun => "noun",
            PosTag::Adjective => "adjective",
            PosTag::Verb => "verb",
            PosTag::Adverb => "adverb",
            PosTag::Other => "other",
        })
    }
}

/// Word → part-of-speech table; unknown words are `Other`.
#[derive(Clone, Debug, Default)]
pub struct PosLexicon {
    tags: HashMap<String, PosTag>,
}

impl PosLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, tag: PosTag) {
        self.tags.insert(word.into().to_lowercase(), tag);
    }

    pub fn tag(&self, word: &str) -> PosTag {
        self.tags
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(PosTag::Other)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// `word\ttag` lines sorted by word.
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<_> = self.tags.iter().collect();
        rows.sort();
        rows.iter().map(|(w, t)| format!("{w}\t{t}\n")).collect()
    }
}

impl<S: Into<String>> FromIterator<(S, PosTag)> for PosLexicon {
    fn from_iter<I: IntoIterator<Item = (S, PosTag)>>(iter: I) -> Self {
        let mut lex = PosLexicon::new();
        for (w, t) in iter {
            lex.insert(w, t);
        }
        lex
    }
}

pub fn load_pos_lexicon(path: &Path) -> Result<PosLexicon> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pos_lexicon(&text, path)
}

pub fn parse_pos_lexicon(text: &str, origin: &Path) -> Result<PosLexicon> {
    let mut lex = PosLexicon::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(origin, i + 1, "expected word<TAB>tag"))?;
        let tag = tag
            .trim()
            .parse()
            .map_err(|e: Error| Error::parse(origin, i + 1, e.to_string()))?;
        lex.insert(word.trim(), tag);
    }
    Ok(lex)
}

pub fn pos_tag<S: AsRef<str>>(words: &[S], lexicon: &PosLexicon) -> Vec<PosTag> {
    words.iter().map(|w| lexicon.tag(w.as_ref())).collect()
}

/// Splits a token stream into sentences on `.`, `!` and `?` tokens.
pub fn split_sentences<S: AsRef<str>>(words: &[S]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for w in words {
        let w = w.as_ref();
        if matches!(w, "." | "!" | "?") {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(w.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Mines adjacent-pair phrases from transcript sentences:
///
/// * adjective noun → `(noun, has_property, adjective)`
/// * noun₁ noun₂ → `(noun₂, related_to, noun₁)`
/// * adverb verb → `(verb, done_manner, adverb)`
pub fn build_specific_kg<S: AsRef<str>>(sentences: &[Vec<S>], lexicon: &PosLexicon) -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::new();
    for sentence in sentences {
        let tags = pos_tag(sentence, lexicon);
        for i in 1..sentence.len() {
            let (a, b) = (sentence[i - 1].as_ref(), sentence[i].as_ref());
            let triple = match (tags[i - 1], tags[i]) {
                (PosTag::Adjective, PosTag::Noun) => Some((b, HAS_PROPERTY, a)),
                (PosTag::Noun, PosTag::Noun) => Some((b, RELATED_TO, a)),
                (PosTag::Adverb, PosTag::Verb) => Some((b, DONE_MANNER, a)),
                _ => None,
            };
            if let Some((h, r, t)) = triple {
                kg.insert(KnowledgeTriple::new(
                    h.to_lowercase(),
                    r,
                    t.to_lowercase(),
                    KgSource::Specific,
                ))
                .expect("words are non-empty");
            }
        }
    }
    kg
}
