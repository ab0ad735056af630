//! Knowledge graphs: general triples ingested from TSV, specific triples mined
//! from transcripts, category retrieval and transcript-similarity ranking.

mod pos;
mod rank;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pos::{build_specific_kg, load_pos_lexicon, parse_pos_lexicon, pos_tag, split_sentences, PosLexicon, PosTag};
pub use rank::{
    rank_knowledge, select_clip_knowledge, triple_words, unranked_prefix, KnowledgeItem,
    RankedKnowledge, ScoredTriple,
};

pub const HAS_PROPERTY: &str = "has_property";
pub const RELATED_TO: &str = "related_to";
pub const DONE_MANNER: &str = "done_manner";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KgSource {
    General,
    Specific,
}

impl fmt::Display for KgSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KgSource::General => "general",
            KgSource::Specific => "specific",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KnowledgeTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source: KgSource,
}

impl KnowledgeTriple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
        source: KgSource,
    ) -> Self {
        KnowledgeTriple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            source,
        }
    }

    /// Identity used for duplicate collapse; the source tag is not part of it.
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.head, &self.relation, &self.tail)
    }
}

/// Triples in insertion order, indexed by case-folded head and tail terms.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    triples: Vec<KnowledgeTriple>,
    counts: Vec<usize>,
    keys: HashMap<(String, String, String), usize>,
    index: HashMap<String, Vec<usize>>,
    relation_set: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped: usize,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a triple or bumps the occurrence count of an existing one.
    /// Returns true when the triple was new.
    pub fn insert(&mut self, triple: KnowledgeTriple) -> Result<bool> {
        if triple.head.trim().is_empty() || triple.tail.trim().is_empty() {
            return Err(Error::Data(format!(
                "triple with empty node: {:?}",
                triple.key()
            )));
        }
        let key = (
            triple.head.clone(),
            triple.relation.clone(),
            triple.tail.clone(),
        );
        if let Some(&i) = self.keys.get(&key) {
            self.counts[i] += 1;
            return Ok(false);
        }
        let i = self.triples.len();
        self.keys.insert(key, i);
        let h = triple.head.to_lowercase();
        let t = triple.tail.to_lowercase();
        self.index.entry(h.clone()).or_default().push(i);
        if t != h {
            self.index.entry(t).or_default().push(i);
        }
        if !self.relation_set.contains(&triple.relation) {
            self.relation_set.push(triple.relation.clone());
        }
        self.triples.push(triple);
        self.counts.push(1);
        Ok(true)
    }

    pub fn triples(&self) -> &[KnowledgeTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct relation labels in order of first appearance.
    pub fn relation_set(&self) -> &[String] {
        &self.relation_set
    }

    /// How many times a triple was inserted before duplicates collapsed.
    pub fn occurrences(&self, triple: &KnowledgeTriple) -> usize {
        let key = (
            triple.head.clone(),
            triple.relation.clone(),
            triple.tail.clone(),
        );
        self.keys.get(&key).map_or(0, |&i| self.counts[i])
    }

    pub fn count_by_source(&self, source: KgSource) -> usize {
        self.triples.iter().filter(|t| t.source == source).count()
    }

    /// Every triple whose head or tail equals `category` (case-folded), in
    /// insertion order.
    pub fn retrieve(&self, category: &str) -> Vec<&KnowledgeTriple> {
        self.index
            .get(&category.to_lowercase())
            .map(|ids| ids.iter().map(|&i| &self.triples[i]).collect())
            .unwrap_or_default()
    }

    /// `head\trelation\ttail` per line, insertion order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads `head\trelation\ttail` lines; `#` comments and blank lines are skipped.
pub fn load_general_kg(path: &Path) -> Result<(KnowledgeGraph, LoadStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text, KgSource::General, path)
}

pub fn parse_triples(
    text: &str,
    source: KgSource,
    origin: &Path,
) -> Result<(KnowledgeGraph, LoadStats)> {
    let mut kg = KnowledgeGraph::new();
    let mut stats = LoadStats::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            stats.skipped += 1;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                origin,
                i + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let triple = KnowledgeTriple::new(fields[0].trim(), fields[1].trim(), fields[2].trim(), source);
        let added = kg
            .insert(triple)
            .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        if added {
            stats.loaded += 1;
        } else {
            stats.skipped += 1;
        }
    }
    Ok((kg, stats))
}

/// Union of the two graphs; on overlap the general copy (inserted first) wins.
pub fn merge_graphs(general: Option<&KnowledgeGraph>, specific: Option<&KnowledgeGraph>) -> KnowledgeGraph {
    let mut out = KnowledgeGraph::new();
    for kg in [general, specific].into_iter().flatten() {
        for t in kg.triples() {
            let n = kg.occurrences(t);
            for _ in 0..n {
                out.insert(t.clone()).expect("triples were validated on insert");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg(text: &str) -> KnowledgeGraph {
        parse_triples(text, KgSource::General, Path::new("kg.tsv")).unwrap().0
    }

    #[test]
    fn retrieves_loaded_triples_by_head() {
        let g = kg("knife\tused to\tcut\nknife\thas property\thard\n");
        let got = g.retrieve("knife");
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].key(), ("knife", "used to", "cut"));
        assert_eq!(got[1].key(), ("knife", "has property", "hard"));
        assert_eq!(g.relation_set(), ["used to", "has property"]);
    }

    #[test]
    fn retrieval_is_case_folded_and_matches_tail() {
        let g = kg("bread\tcut_with\tKnife\n");
        assert_eq!(g.retrieve("knife").len(), 1);
        assert_eq!(g.retrieve("BREAD").len(), 1);
        assert!(g.retrieve("spoon").is_empty());
    }

    #[test]
    fn empty_and_comment_only_files() {
        let (g, stats) = parse_triples("# header\n\n", KgSource::General, Path::new("x")).unwrap();
        assert!(g.is_empty());
        assert_eq!(stats, LoadStats { loaded: 0, skipped: 2 });
        assert!(g.retrieve("knife").is_empty());
    }

    #[test]
    fn duplicates_collapse_with_counts() {
        let (g, stats) =
            parse_triples("a\tr\tb\na\tr\tb\na\tr\tc\n", KgSource::General, Path::new("x")).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(stats, LoadStats { loaded: 2, skipped: 1 });
        assert_eq!(g.occurrences(&g.triples()[0]), 2);
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let err = parse_triples("a\tr\tb\nbroken line\n", KgSource::General, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn merge_identity_and_overlap() {
        let g = kg("knife\tused to\tcut\n");
        let merged = merge_graphs(Some(&g), None);
        assert_eq!(merged.triples(), g.triples());
        assert!(merge_graphs(None, None).is_empty());

        let mut s = KnowledgeGraph::new();
        s.insert(KnowledgeTriple::new("knife", "used to", "cut", KgSource::Specific)).unwrap();
        s.insert(KnowledgeTriple::new("knife", HAS_PROPERTY, "sharp", KgSource::Specific)).unwrap();
        let m = merge_graphs(Some(&g), Some(&s));
        assert_eq!(m.len(), 2);
        assert_eq!(m.triples()[0].source, KgSource::General);
        assert_eq!(m.triples()[1].source, KgSource::Specific);
        assert_eq!(m.count_by_source(KgSource::General), 1);
    }

    #[test]
    fn tsv_round_trip() {
        let g = kg("knife\tused to\tcut\nonion\thas_property\tcrisp\n");
        let back = kg(&g.to_tsv());
        assert_eq!(back.triples(), g.triples());
    }

    proptest::proptest! {
        #[test]
        fn every_loaded_triple_is_retrievable_by_head(
            rows in proptest::collection::vec(("[a-e]{1,2}", "[rs]", "[a-e]{1,2}"), 0..40)
        ) {
            let text: String = rows.iter().map(|(h, r, t)| format!("{h}\t{r}\t{t}\n")).collect();
            let g = kg(&text);
            for (h, r, t) in &rows {
                let hits = g.retrieve(h);
                proptest::prop_assert!(hits.iter().any(|x| x.key() == (h.as_str(), r.as_str(), t.as_str())));
            }
        }
    }
}
