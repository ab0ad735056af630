//! Brute-force metric oracles written straight from the metric definitions,
//! plus the frozen 10-item fixture. Nothing here calls into the library.

#![allow(dead_code)]

use std::collections::HashMap;

pub fn words(text: &str) -> Vec<String> {
    let kept: String = text
        .chars()
        .map(|c| c.to_ascii_lowercase())
        .filter(|c| c.is_ascii_alphanumeric() || *c == ' ' || *c == '\'' || *c == '\t' || *c == '\n')
        .collect();
    kept.split(' ').flat_map(|s| s.split(['\t', '\n'])).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// (clipped matches, candidate n-grams) for n = 1..4, candidate length and
/// the closest reference length (shorter on ties).
pub fn bleu_counts(c: &[String], refs: &[Vec<String>]) -> ([f64; 4], [f64; 4], f64, f64) {
    let mut m = [0.0; 4];
    let mut t = [0.0; 4];
    for n in 1..=4 {
        let cg = grams(c, n);
        t[n - 1] = cg.len() as f64;
        for g in distinct(&cg) {
            let best_ref = refs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap_or(0);
            m[n - 1] += count(&cg, &g).min(best_ref) as f64;
        }
    }
    let mut best = refs[0].len();
    for r in refs {
        let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    (m, t, c.len() as f64, best as f64)
}

pub fn bleu_from_counts(m: [f64; 4], t: [f64; 4], c: f64, r: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for n in 0..4 {
        let p = if m[n] == 0.0 { 1e-9 / t[n].max(1.0) } else { m[n] / t[n] };
        prod *= p;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * prod.powf(0.25)
}

pub fn bleu(c: &[String], refs: &[Vec<String>]) -> f64 {
    let (m, t, cl, rl) = bleu_counts(c, refs);
    bleu_from_counts(m, t, cl, rl)
}

pub fn corpus_bleu(items: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let (mut m, mut t, mut c, mut r) = ([0.0; 4], [0.0; 4], 0.0, 0.0);
    for (cand, refs) in items {
        let (mi, ti, ci, ri) = bleu_counts(cand, refs);
        for n in 0..4 {
            m[n] += mi[n];
            t[n] += ti[n];
        }
        c += ci;
        r += ri;
    }
    bleu_from_counts(m, t, c, r)
}

fn lcs(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs(a, b, i + 1, j + 1, memo)
    } else {
        lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

pub fn rouge(c: &[String], refs: &[Vec<String>]) -> f64 {
    let beta2 = 1.2;
    refs.iter()
        .map(|r| {
            let l = lcs(c, r, 0, 0, &mut HashMap::new()) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            (1.0 + beta2) * p * rec / (rec + beta2 * p)
        })
        .fold(0.0, f64::max)
}

/// Term-frequency-normalized TF-IDF vectors, cosine per reference and order.
pub fn cider(items: &[(Vec<String>, Vec<Vec<String>>)]) -> Vec<f64> {
    let big_n = items.len() as f64;
    let mut scores = vec![0.0; items.len()];
    for n in 1..=4 {
        let df = |g: &[String]| -> f64 {
            items
                .iter()
                .filter(|(_, refs)| refs.iter().any(|r| count(&grams(r, n), g) > 0))
                .count() as f64
        };
        let vec_of = |s: &[String]| -> Vec<(Vec<String>, f64)> {
            let all = grams(s, n);
            let total = all.len() as f64;
            distinct(&all)
                .into_iter()
                .map(|g| {
                    let tf = count(&all, &g) as f64 / total;
                    let idf = (big_n / df(&g).max(1.0)).ln();
                    (g, tf * idf)
                })
                .collect()
        };
        for (k, (cand, refs)) in items.iter().enumerate() {
            let cv = vec_of(cand);
            let mut sum = 0.0;
            for r in refs {
                let rv = vec_of(r);
                let mut dot = 0.0;
                for (g, x) in &cv {
                    for (h, y) in &rv {
                        if g == h {
                            dot += x * y;
                        }
                    }
                }
                let nc = cv.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
                let nr = rv.iter().map(|(_, y)| y * y).sum::<f64>().sqrt();
                sum += if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { 0.0 };
            }
            scores[k] += sum / refs.len() as f64;
        }
    }
    scores.iter().map(|s| s / 4.0 * 10.0).collect()
}

pub fn rep4(p: &[String]) -> f64 {
    let g = grams(p, 4);
    if g.is_empty() {
        return 0.0;
    }
    1.0 - distinct(&g).len() as f64 / g.len() as f64
}

/// Ten `(candidate, references)` items covering exact matches, disjoint
/// text, empty and short candidates, repeats, punctuation and case.
pub const FIXTURE: [(&str, &[&str]); 10] = [
    ("slice the red onion into thin rings", &["slice the red onion into thin rings"]),
    ("the cat sat", &["the cat sat down"]),
    ("Add the salt, then stir!", &["add some salt and stir", "then stir in the salt"]),
    ("boil water", &["pour the milk into a pan", "heat the oil"]),
    ("", &["whisk the eggs"]),
    ("stir stir stir stir stir the pot", &["stir the pot", "stir the soup in the pot slowly"]),
    ("cut the onion cut the onion cut the onion", &["cut the onion and the garlic"]),
    ("don't burn the garlic", &["don't let the garlic burn", "fry the garlic gently"]),
    ("place the dough on a floured board and knead it", &["knead the dough on a floured board", "place the dough on the board"]),
    ("a b c d", &["a c d", "b c d e"]),
];

pub fn fixture_items() -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    FIXTURE
        .iter()
        .map(|(c, refs)| (words(c), refs.iter().map(|r| words(r)).collect()))
        .collect()
}
