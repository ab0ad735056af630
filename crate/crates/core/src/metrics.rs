//! Caption metrics: BLEU@4, ROUGE-L, CIDEr and Rep@4, with micro (per clip)
//! and paragraph (per video) evaluation drivers.
//!
//! Text is lowercased, stripped of punctuation other than apostrophes and
//! split on whitespace before scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};

/// Stand-in for a zero n-gram match count in BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;
/// ROUGE-L F-measure weight, `β²`.
pub const ROUGE_BETA_SQ: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;
const MAX_N: usize = 4;

pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || *c == '\'')
        .collect();
    cleaned.split_whitespace().map(str::to_lowercase).collect()
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(words: &[String], n: usize) -> Counts<'_> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate totals per order, plus lengths for the
/// brevity penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct BleuStats {
    matches: [usize; MAX_N],
    totals: [usize; MAX_N],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn of(cand: &[String], refs: &[Vec<String>]) -> Self {
        let mut s = BleuStats {
            cand_len: cand.len(),
            ref_len: closest_ref_len(cand.len(), refs),
            ..Default::default()
        };
        for n in 1..=MAX_N {
            let c = ngrams(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            s.matches[n - 1] = c.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
            s.totals[n - 1] = cand.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for i in 0..MAX_N {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for i in 0..MAX_N {
            let p = if self.matches[i] == 0 {
                BLEU_EPSILON / self.totals[i].max(1) as f64
            } else {
                self.matches[i] as f64 / self.totals[i] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * (log_sum / MAX_N as f64).exp()
    }
}

/// Reference length closest to `c`; the shorter one on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn require_refs(refs: &[Vec<String>]) -> Result<()> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("at least one reference is required".into()));
    }
    Ok(())
}

/// Sentence BLEU@4 on tokenized text.
///
/// Geometric mean of clipped 1- to 4-gram precisions times the brevity
/// penalty against the closest reference length. A zero match count at order
/// `n` is replaced by `BLEU_EPSILON / max(total_n, 1)`.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    require_refs(references)?;
    Ok(BleuStats::of(candidate, references).score())
}

/// Corpus BLEU@4 from match counts summed over items.
pub fn corpus_bleu4(items: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<f64> {
    let mut total = BleuStats::default();
    for (c, r) in items {
        require_refs(r)?;
        total.add(&BleuStats::of(c, r));
    }
    Ok(total.score())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: LCS F-measure `(1+β²)PR / (R + β²P)`, best over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    require_refs(references)?;
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut best: f64 = 0.0;
    for r in references {
        let l = lcs_len(candidate, r);
        if l == 0 {
            continue;
        }
        let p = l as f64 / candidate.len() as f64;
        let rec = l as f64 / r.len() as f64;
        best = best.max((1.0 + ROUGE_BETA_SQ) * p * rec / (rec + ROUGE_BETA_SQ * p));
    }
    Ok(best)
}

/// Per-item CIDEr and their mean.
///
/// Document frequencies come from the reference sets of all items:
/// `idf(g) = ln N - ln max(1, df(g))`. For each order the score is the mean
/// cosine between TF-IDF vectors of the candidate and each reference; orders
/// are averaged and scaled by 10.
pub fn cider(items: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<(Vec<f64>, f64)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("CIDEr needs a non-empty reference corpus".into()));
    }
    for (_, r) in items {
        require_refs(r)?;
    }
    let n_docs = items.len() as f64;
    let mut scores = vec![0.0; items.len()];
    for n in 1..=MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for (_, refs) in items {
            let set: BTreeSet<&[String]> = refs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in set {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| n_docs.ln() - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let vector = |words: &[String]| -> BTreeMap<Vec<String>, f64> {
            ngrams(words, n)
                .into_iter()
                .map(|(g, k)| (g.to_vec(), k as f64 * idf(g)))
                .collect()
        };
        for (i, (cand, refs)) in items.iter().enumerate() {
            let cv = vector(cand);
            let mut sum = 0.0;
            for r in refs {
                sum += cosine(&cv, &vector(r));
            }
            scores[i] += sum / refs.len() as f64;
        }
    }
    for s in &mut scores {
        *s *= CIDER_SCALE / MAX_N as f64;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `1 - distinct/total` over the paragraph's 4-grams; 0 below four words.
pub fn rep4(paragraph: &[String]) -> f64 {
    if paragraph.len() < 4 {
        return 0.0;
    }
    let total = paragraph.len() - 3;
    let distinct = ngrams(paragraph, 4).len();
    1.0 - distinct as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalMode {
    Micro,
    Paragraph,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Micro => "micro",
            EvalMode::Paragraph => "paragraph",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(EvalMode::Micro),
            "paragraph" => Ok(EvalMode::Paragraph),
            _ => Err(Error::InvalidArgument(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

/// A clip to be scored: its place in the dataset and its reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalClip {
    pub video_id: String,
    pub clip_id: String,
    pub references: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemScores {
    pub id: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub rep4: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Paragraph mode only.
    pub rep4: Option<f64>,
    pub items: Vec<ItemScores>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let rep = self.rep4.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        format!(
            "mode      {}\nitems     {}\nBLEU@4    {:.4}\nMETEOR    n/a\nROUGE-L   {:.4}\nCIDEr     {:.4}\nRep@4     {}\n",
            self.mode,
            self.items.len(),
            self.bleu4,
            self.rouge_l,
            self.cider,
            rep
        )
    }

    /// `metric\tmode\tvalue` lines; absent metrics are written as `absent`.
    pub fn to_lines(&self) -> String {
        let m = self.mode;
        let rep = self.rep4.map_or("absent".to_string(), |v| v.to_string());
        format!(
            "bleu4\t{m}\t{}\nmeteor\t{m}\tabsent\nrouge_l\t{m}\t{}\ncider\t{m}\t{}\nrep4\t{m}\t{rep}\n",
            self.bleu4, self.rouge_l, self.cider
        )
    }
}

/// Predictions keyed by `(video_id, clip_id)`.
pub type Predictions = HashMap<(String, String), String>;

fn check_coverage(preds: &Predictions, clips: &[EvalClip]) -> Result<()> {
    let known: BTreeSet<(&str, &str)> = clips.iter().map(|c| (c.video_id.as_str(), c.clip_id.as_str())).collect();
    let missing: Vec<String> = clips
        .iter()
        .filter(|c| !preds.contains_key(&(c.video_id.clone(), c.clip_id.clone())))
        .map(|c| format!("{}/{}", c.video_id, c.clip_id))
        .collect();
    let mut unknown: Vec<String> = preds
        .keys()
        .filter(|(v, c)| !known.contains(&(v.as_str(), c.as_str())))
        .map(|(v, c)| format!("{v}/{c}"))
        .collect();
    unknown.sort();
    let mut problems = Vec::new();
    if !missing.is_empty() {
        problems.push(format!("missing predictions for {}", missing.join(", ")));
    }
    if !unknown.is_empty() {
        problems.push(format!("predictions for clips not in the dataset: {}", unknown.join(", ")));
    }
    if let Some(c) = clips.iter().find(|c| c.references.is_empty()) {
        problems.push(format!("clip {}/{} has no reference captions", c.video_id, c.clip_id));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(problems.join("; ")))
    }
}

fn score_items(
    mode: EvalMode,
    ids: Vec<String>,
    items: Vec<(Vec<String>, Vec<Vec<String>>)>,
    with_rep: bool,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Ok(EvalReport {
            mode,
            bleu4: 0.0,
            rouge_l: 0.0,
            cider: 0.0,
            rep4: with_rep.then_some(0.0),
            items: Vec::new(),
        });
    }
    let (cider_items, cider_mean) = cider(&items)?;
    let mut scored = Vec::with_capacity(items.len());
    for ((id, (c, r)), ci) in ids.into_iter().zip(&items).zip(cider_items) {
        scored.push(ItemScores {
            id,
            bleu4: bleu4(c, r)?,
            rouge_l: rouge_l(c, r)?,
            cider: ci,
            rep4: with_rep.then(|| rep4(c)),
        });
    }
    let n = scored.len() as f64;
    Ok(EvalReport {
        mode,
        bleu4: corpus_bleu4(&items)?,
        rouge_l: scored.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        cider: cider_mean,
        rep4: with_rep.then(|| scored.iter().filter_map(|s| s.rep4).sum::<f64>() / n),
        items: scored,
    })
}

/// Every clip scored on its own.
pub fn evaluate_micro(preds: &Predictions, clips: &[EvalClip]) -> Result<EvalReport> {
    check_coverage(preds, clips)?;
    let mut ids = Vec::new();
    let mut items = Vec::new();
    for c in clips {
        let p = &preds[&(c.video_id.clone(), c.clip_id.clone())];
        ids.push(format!("{}/{}", c.video_id, c.clip_id));
        items.push((tokenize(p), c.references.iter().map(|r| tokenize(r)).collect()));
    }
    score_items(EvalMode::Micro, ids, items, false)
}

/// One paragraph per video: clip captions joined in clip order. Reference
/// paragraph `j` joins each clip's reference `j`, or its last reference when
/// the clip has fewer.
pub fn evaluate_paragraph(preds: &Predictions, clips: &[EvalClip]) -> Result<EvalReport> {
    check_coverage(preds, clips)?;
    let mut order: Vec<&str> = Vec::new();
    let mut by_video: HashMap<&str, Vec<&EvalClip>> = HashMap::new();
    for c in clips {
        let e = by_video.entry(c.video_id.as_str()).or_default();
        if e.is_empty() {
            order.push(&c.video_id);
        }
        e.push(c);
    }
    let mut ids = Vec::new();
    let mut items = Vec::new();
    for v in order {
        let vc = &by_video[v];
        let para: Vec<String> = vc
            .iter()
            .flat_map(|c| tokenize(&preds[&(c.video_id.clone(), c.clip_id.clone())]))
            .collect();
        let n_refs = vc.iter().map(|c| c.references.len()).max().unwrap_or(0);
        let refs: Vec<Vec<String>> = (0..n_refs)
            .map(|j| {
                vc.iter()
                    .flat_map(|c| tokenize(&c.references[j.min(c.references.len() - 1)]))
                    .collect()
            })
            .collect();
        ids.push(v.to_string());
        items.push((para, refs));
    }
    score_items(EvalMode::Paragraph, ids, items, true)
}

pub fn evaluate(mode: EvalMode, preds: &Predictions, clips: &[EvalClip]) -> Result<EvalReport> {
    match mode {
        EvalMode::Micro => evaluate_micro(preds, clips),
        EvalMode::Paragraph => evaluate_paragraph(preds, clips),
    }
}
