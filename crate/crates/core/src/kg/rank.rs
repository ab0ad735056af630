use std::cmp::Reverse;
use std::collections::HashSet;

use super::{KnowledgeGraph, KnowledgeTriple};
use crate::embeddings::{cosine_similarity, sentence_embedding, EmbeddingTable};
use crate::error::{Error, Result};

/// Scores closer than this are ordered as ties (then lexicographically by triple).
pub const SCORE_RESOLUTION: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTriple {
    pub triple: KnowledgeTriple,
    /// `None` when the entry came from the unranked fallback.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankedKnowledge {
    pub entries: Vec<ScoredTriple>,
}

impl RankedKnowledge {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn triples(&self) -> impl Iterator<Item = &KnowledgeTriple> {
        self.entries.iter().map(|e| &e.triple)
    }
}

/// Words of head, relation and tail, splitting on whitespace and underscores.
pub fn triple_words(t: &KnowledgeTriple) -> Vec<String> {
    [&t.head, &t.relation, &t.tail]
        .iter()
        .flat_map(|s| s.split(|c: char| c.is_whitespace() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn quantize(score: f64) -> i64 {
    (score / SCORE_RESOLUTION).round() as i64
}

/// Keeps the `n_k` triples most similar to the transcript.
///
/// Each triple is scored by the cosine between the mean word vector of its
/// words and the mean word vector of the transcript. Order is score
/// descending, ties broken by `(head, relation, tail)` ascending.
pub fn rank_knowledge<'a, S: AsRef<str>>(
    triples: impl IntoIterator<Item = &'a KnowledgeTriple>,
    transcript: &[S],
    table: &EmbeddingTable,
    n_k: usize,
) -> Result<RankedKnowledge> {
    if n_k == 0 {
        return Ok(RankedKnowledge::default());
    }
    if transcript.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot rank knowledge against an empty transcript".into(),
        ));
    }
    let query = sentence_embedding(table, transcript)?;
    let mut scored = Vec::new();
    for t in triples {
        let emb = sentence_embedding(table, &triple_words(t))?;
        scored.push(ScoredTriple {
            triple: t.clone(),
            score: Some(cosine_similarity(&emb, &query)?),
        });
    }
    scored.sort_by_cached_key(|s| {
        (
            Reverse(quantize(s.score.unwrap_or(f64::NEG_INFINITY))),
            s.triple.head.clone(),
            s.triple.relation.clone(),
            s.triple.tail.clone(),
        )
    });
    scored.truncate(n_k);
    Ok(RankedKnowledge { entries: scored })
}

/// First `n_k` triples in insertion order, unscored.
pub fn unranked_prefix<'a>(
    triples: impl IntoIterator<Item = &'a KnowledgeTriple>,
    n_k: usize,
) -> RankedKnowledge {
    RankedKnowledge {
        entries: triples
            .into_iter()
            .take(n_k)
            .map(|t| ScoredTriple {
                triple: t.clone(),
                score: None,
            })
            .collect(),
    }
}

/// One knowledge token's worth of information.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeItem {
    pub triple: KnowledgeTriple,
    /// Detected-object category the triple was retrieved for.
    pub category: String,
    /// The node that is not the category; its word vector feeds the token.
    pub node: String,
    pub score: Option<f64>,
}

/// Retrieves, ranks and deduplicates knowledge for every detected category of a
/// clip, keeping at most `n_k` triples per category.
///
/// Ranking is skipped (insertion order is used instead) when `use_selection`
/// is off or the transcript is empty.
pub fn select_clip_knowledge<S: AsRef<str>>(
    kg: &KnowledgeGraph,
    categories: &[S],
    transcript: &[S],
    table: &EmbeddingTable,
    n_k: usize,
    use_selection: bool,
) -> Result<Vec<KnowledgeItem>> {
    let mut seen_categories = HashSet::new();
    let mut seen_triples = HashSet::new();
    let mut out = Vec::new();
    for cat in categories {
        let cat = cat.as_ref().to_lowercase();
        if !seen_categories.insert(cat.clone()) {
            continue;
        }
        let hits = kg.retrieve(&cat);
        let ranked = if use_selection && !transcript.is_empty() {
            rank_knowledge(hits, transcript, table, n_k)?
        } else {
            unranked_prefix(hits, n_k)
        };
        for e in ranked.entries {
            let key = (
                e.triple.head.clone(),
                e.triple.relation.clone(),
                e.triple.tail.clone(),
            );
            if !seen_triples.insert(key) {
                continue;
            }
            let node = if e.triple.head.to_lowercase() == cat {
                e.triple.tail.clone()
            } else {
                e.triple.head.clone()
            };
            out.push(KnowledgeItem {
                triple: e.triple,
                category: cat.clone(),
                node,
                score: e.score,
            });
        }
    }
    Ok(out)
}
