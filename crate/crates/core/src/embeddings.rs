//! Word vectors, the caption vocabulary, mean-pooled sentence embeddings and
//! cosine similarity.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_WORD_DIM: usize = 300;

/// Word → vector lookup. Lookup is total: words without a stored vector get a
/// unit-norm vector derived from a hash of the word and `unk_seed`.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    unk_seed: u64,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            unk_seed: 0,
        }
    }

    pub fn with_unk_seed(mut self, seed: u64) -> Self {
        self.unk_seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    /// Inserts or replaces; returns true when the word was already present.
    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of length {} in a table of dim {}",
                vector.len(),
                self.dim
            )));
        }
        Ok(self.vectors.insert(word.into(), vector).is_some())
    }

    pub fn embed_word(&self, word: &str) -> Vec<f64> {
        match self.vectors.get(word) {
            Some(v) => v.clone(),
            None => self.fallback(word),
        }
    }

    fn fallback(&self, word: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(word.as_bytes());
        h.update(self.unk_seed.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    /// Rows of word vectors, one per word.
    pub fn embed_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<Vec<f64>> {
        words.iter().map(|w| self.embed_word(w.as_ref())).collect()
    }

    /// Words in sorted order, for deterministic serialization.
    pub fn sorted_words(&self) -> Vec<&str> {
        let mut w: Vec<&str> = self.vectors.keys().map(String::as_str).collect();
        w.sort_unstable();
        w
    }
}

/// Reads a GloVe-style text file: `word v1 … v_dim` per line.
///
/// Returns the table and the number of duplicate words (the last occurrence wins).
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<(EmbeddingTable, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text, dim, path)
}

pub fn parse_word_vectors(text: &str, dim: usize, origin: &Path) -> Result<(EmbeddingTable, usize)> {
    let mut table = EmbeddingTable::new(dim);
    let mut duplicates = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let word = parts.next().unwrap_or_default();
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| Error::parse(origin, i + 1, format!("bad number: {e}")))?;
        if values.len() != dim {
            return Err(Error::parse(
                origin,
                i + 1,
                format!("expected {dim} values for {word:?}, found {}", values.len()),
            ));
        }
        if table.insert(word, values)? {
            duplicates += 1;
        }
    }
    Ok((table, duplicates))
}

/// Writes the table in the same text layout `load_word_vectors` reads.
pub fn write_word_vectors(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut out = String::new();
    for w in table.sorted_words() {
        out.push_str(w);
        for v in &table.vectors[w] {
            out.push(' ');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean of the word vectors of `words`.
pub fn sentence_embedding<S: AsRef<str>>(table: &EmbeddingTable, words: &[S]) -> Result<Vec<f64>> {
    if words.is_empty() {
        return Err(Error::InvalidArgument(
            "sentence embedding of an empty word sequence".into(),
        ));
    }
    let mut acc = vec![0.0; table.dim()];
    for w in words {
        let v = table.embed_word(w.as_ref());
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
    }
    let n = words.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `u·v / (‖u‖‖v‖)`, defined as 0 when either vector is zero.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with {} and {} dims",
            u.len(),
            v.len()
        )));
    }
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Ok(0.0);
    }
    Ok(uv / (uu * vv).sqrt())
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijection between caption words and output indices. Indices 0..4 are
/// reserved for PAD, BOS, EOS and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_words(std::iter::empty::<String>()).expect("reserved tokens only")
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in the given order.
    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words.into_iter().map(Into::into));
        let mut index = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words: all, index })
    }

    /// Words occurring at least `min_count` times across `sentences`, sorted.
    pub fn build<'a, I, S>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for w in s {
                *counts.entry(w.as_ref()).or_default() += 1;
            }
        }
        let words = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(w))
            .map(|(w, _)| w.to_string())
            .collect::<Vec<_>>();
        Self::from_words(words).expect("BTreeMap keys are distinct")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `word`, or UNK.
    pub fn index(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> &str {
        &self.words[index]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One word per line, index order, reserved tokens included.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary file does not start with the reserved tokens".into()));
        }
        Self::from_words(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn parse(text: &str, dim: usize) -> Result<(EmbeddingTable, usize)> {
        parse_word_vectors(text, dim, Path::new("vectors.txt"))
    }

    #[test]
    fn loads_valid_lines() {
        let (t, dup) = parse("cat 1 2 3\ndog 4 5 6\n", 3).unwrap();
        assert_eq!((t.len(), dup), (2, 0));
        assert_eq!(t.embed_word("dog"), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn wrong_length_names_line() {
        let err = parse("cat 1 2\n", 3).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_table() {
        let (t, _) = parse("", 4).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.embed_word("anything").len(), 4);
    }

    #[test]
    fn duplicates_last_wins() {
        let (t, dup) = parse("cat 1 1\ncat 2 2\n", 2).unwrap();
        assert_eq!(dup, 1);
        assert_eq!(t.embed_word("cat"), vec![2.0, 2.0]);
    }

    #[test]
    fn write_then_load_round_trips() {
        let (t, _) = parse("b 0.5 -1\na 0.1 3e-7\n", 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        write_word_vectors(&t, &p).unwrap();
        let (back, _) = load_word_vectors(&p, 2).unwrap();
        assert_eq!(back.embed_word("a"), t.embed_word("a"));
        assert_eq!(back.embed_word("b"), t.embed_word("b"));
    }

    #[test]
    fn fallback_is_deterministic_and_unit_norm() {
        let t = EmbeddingTable::new(300);
        let a = t.embed_word("zyzzyva");
        assert_eq!(a, t.embed_word("zyzzyva"));
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let other_seed = EmbeddingTable::new(300).with_unk_seed(9);
        assert_ne!(a, other_seed.embed_word("zyzzyva"));
    }

    #[test]
    fn fallback_vectors_are_distinct() {
        let t = EmbeddingTable::new(300);
        let mut seen = HashSet::new();
        for i in 0..1000 {
            let v = t.embed_word(&format!("w{i}"));
            let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key), "collision at w{i}");
        }
    }

    #[test]
    fn sentence_embedding_cases() {
        let (t, _) = parse("a 1 2\nb -1 -2\nc 3 0.5\n", 2).unwrap();
        assert_eq!(sentence_embedding(&t, &["a"]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sentence_embedding(&t, &["a", "b"]).unwrap(), vec![0.0, 0.0]);
        let m = sentence_embedding(&t, &["a", "b", "c"]).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12 && (m[1] - 0.5 / 3.0).abs() < 1e-12);
        assert!(sentence_embedding::<&str>(&t, &[]).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[0.3, -2.0, 7.0], &[0.3, -2.0, 7.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn vocabulary_reserves_specials() {
        let sents: Vec<Vec<String>> = vec![
            vec!["slice".into(), "the".into(), "onion".into()],
            vec!["the".into(), "<eos>".into()],
        ];
        let v = Vocabulary::build(sents.iter().map(|s| s.as_slice()), 1);
        assert_eq!(v.word(BOS), "<bos>");
        assert_eq!(v.len(), 4 + 3);
        assert_eq!(v.index("onion"), 4);
        assert_eq!(v.index("missing"), UNK);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        let v2 = Vocabulary::build(sents.iter().map(|s| s.as_slice()), 2);
        assert_eq!(v2.words()[4..], ["the".to_string()]);
    }

    proptest::proptest! {
        #[test]
        fn cosine_symmetric_bounded_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 5),
            v in proptest::collection::vec(-10.0f64..10.0, 5),
            alpha in 0.01f64..100.0,
        ) {
            let a = cosine_similarity(&u, &v).unwrap();
            let b = cosine_similarity(&v, &u).unwrap();
            proptest::prop_assert_eq!(a, b);
            proptest::prop_assert!(a.abs() <= 1.0 + 1e-12);
            let scaled: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            let c = cosine_similarity(&scaled, &v).unwrap();
            proptest::prop_assert!((a - c).abs() < 1e-12);
        }
    }
}
