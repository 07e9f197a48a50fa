//! Independent re-implementations of the scoring rules, used as test oracles.

use std::collections::{BTreeMap, BTreeSet};

use inta_core::corpus::ManualPage;
use inta_core::retrieval::{build_context, Ranked};

pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn bm25_brute(docs: &[(String, Vec<String>)], query: &str, k1: f64, b: f64) -> BTreeMap<String, f64> {
    let n = docs.len() as f64;
    let avg = docs.iter().map(|(_, d)| d.len()).sum::<usize>() as f64 / n;
    let avg = if avg > 0.0 { avg } else { 1.0 };
    let terms: BTreeSet<String> = words(query).into_iter().collect();
    let mut out = BTreeMap::new();
    for (id, doc) in docs {
        let mut score = 0.0;
        for t in &terms {
            let tf = doc.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = docs.iter().filter(|(_, d)| d.contains(t)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg));
        }
        out.insert(id.clone(), score);
    }
    out
}

pub fn indexed_words(p: &ManualPage) -> Vec<String> {
    let mut w = words(&p.title);
    w.extend(words(&p.description));
    for c in &p.commands {
        w.extend(words(c));
    }
    w
}

pub fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(14695981039346656037u64, |h, b| (h ^ *b as u64).wrapping_mul(1099511628211))
}

pub fn hashed(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for w in words(text) {
        v[(fnv(w.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn cosine_ranking(query: &str, pages: &[&ManualPage], dim: usize) -> Vec<(String, f64)> {
    let q = hashed(query, dim);
    let mut v: Vec<(String, f64)> = pages.iter().map(|p| (p.id.clone(), cosine(&q, &hashed(&build_context(p), dim)))).collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    v
}

pub fn vote_brute(lists: &BTreeMap<String, Ranked>) -> BTreeMap<String, f64> {
    let mut ids = BTreeSet::new();
    for l in lists.values() {
        ids.extend(l.iter().map(|(id, _)| id.clone()));
    }
    ids.into_iter()
        .map(|id| {
            let s: f64 = lists.values().flat_map(|l| l.iter().filter(|(i, _)| *i == id).map(|(_, s)| s.max(0.0))).sum();
            (id, s)
        })
        .collect()
}

pub fn c2c_brute(config: &BTreeMap<String, f64>, refs: &BTreeMap<String, Vec<Option<String>>>) -> (BTreeMap<String, f64>, usize) {
    let mut out = BTreeMap::new();
    let mut skipped = 0;
    for (cfg, score) in config {
        for target in &refs[cfg] {
            match target {
                Some(cmd) => *out.entry(cmd.clone()).or_insert(0.0) += score,
                None => skipped += 1,
            }
        }
    }
    (out, skipped)
}


/// Number of queries with a relevant page among the first `k` of their ranking.
pub fn recall_hits(relevant: &[(String, Vec<String>)], rankings: &BTreeMap<String, Vec<String>>, k: usize) -> usize {
    relevant
        .iter()
        .filter(|(id, rel)| rankings[id].iter().take(k).any(|p| rel.contains(p)))
        .count()
}

/// Full cosine ranking of every page for each (id, query).
pub fn rank_all(queries: &[(String, String)], pages: &[&ManualPage], dim: usize) -> BTreeMap<String, Vec<String>> {
    queries
        .iter()
        .map(|(id, q)| (id.clone(), cosine_ranking(q, pages, dim).into_iter().map(|(p, _)| p).collect()))
        .collect()
}
