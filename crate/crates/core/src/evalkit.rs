//! Translation quality metrics and the retrieval recall harness.
//!
//! Blank, comment and exit lines never count towards a line denominator.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{normalize_ws, LineStatus, VdmTree, VendorProfile};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference line {line} ({text:?}) matches no command template")]
    UnparseableReference { line: usize, text: String },
    #[error("case {case}: {source}")]
    Case {
        case: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error("no evaluation cases")]
    EmptyDataset,
    #[error("k must be at least 1")]
    InvalidK,
}

/// Hits over a line count; the ratio of an empty denominator is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineRatio {
    pub hits: usize,
    pub total: usize,
}

impl LineRatio {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: LineRatio) {
        self.hits += other.hits;
        self.total += other.total;
    }
}

pub fn tree_match_counts(tree: &VdmTree, candidate: &str) -> LineRatio {
    let v = tree.check_config(candidate);
    LineRatio {
        hits: v.iter().filter(|v| v.status == LineStatus::Matched).count(),
        total: v.iter().filter(|v| v.status != LineStatus::Structural).count(),
    }
}

/// Matched lines (views enforced) over non-structural lines.
pub fn tree_match(tree: &VdmTree, candidate: &str) -> f64 {
    tree_match_counts(tree, candidate).ratio()
}

pub fn syntax_correctness_counts(tree: &VdmTree, candidate: &str) -> LineRatio {
    let v = tree.check_config(candidate);
    LineRatio {
        hits: v.iter().filter(|v| matches!(v.status, LineStatus::Matched | LineStatus::ViewError)).count(),
        total: v.iter().filter(|v| v.status != LineStatus::Structural).count(),
    }
}

/// Lines matching any template, views ignored, over non-structural lines.
pub fn syntax_correctness(tree: &VdmTree, candidate: &str) -> f64 {
    syntax_correctness_counts(tree, candidate).ratio()
}

fn content_lines<'a>(profile: &'a VendorProfile, text: &'a str) -> impl Iterator<Item = String> + 'a {
    text.lines().filter(|l| !profile.is_structural(l)).map(normalize_ws)
}

pub fn exact_match_counts(profile: &VendorProfile, reference: &str, candidate: &str) -> LineRatio {
    let mut available: HashMap<String, usize> = HashMap::new();
    for l in content_lines(profile, candidate) {
        *available.entry(l).or_default() += 1;
    }
    let mut r = LineRatio::default();
    for l in content_lines(profile, reference) {
        r.total += 1;
        if let Some(n) = available.get_mut(&l).filter(|n| **n > 0) {
            *n -= 1;
            r.hits += 1;
        }
    }
    r
}

/// Fraction of reference lines found verbatim (whitespace-normalized) in the
/// candidate, each candidate line usable once.
pub fn exact_match(profile: &VendorProfile, reference: &str, candidate: &str) -> f64 {
    exact_match_counts(profile, reference, candidate).ratio()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandMatchMode {
    /// Same command template, parameter values ignored.
    #[default]
    TemplateOnly,
    /// Same command template and identical parameter bindings.
    ParameterSensitive,
}

type CommandKey = (String, Option<BTreeMap<String, Vec<String>>>);

fn command_keys(tree: &VdmTree, text: &str, mode: CommandMatchMode) -> Vec<Result<CommandKey, (usize, String)>> {
    tree.check_config(text)
        .into_iter()
        .filter(|v| v.status != LineStatus::Structural)
        .map(|v| {
            let hit = match v.status {
                LineStatus::Matched => v.matched_node.map(|id| (id, v.bindings.clone())),
                _ => tree.match_anywhere(&v.text).map(|(id, m)| (id, m.bindings)),
            };
            match hit {
                Some((id, bindings)) => Ok((
                    tree.node(id).compiled.command_id.clone(),
                    (mode == CommandMatchMode::ParameterSensitive).then_some(bindings),
                )),
                None => Err((v.line_no, v.text)),
            }
        })
        .collect()
}

pub fn command_match_counts(
    tree: &VdmTree,
    reference: &str,
    candidate: &str,
    mode: CommandMatchMode,
) -> Result<LineRatio, EvalError> {
    let candidates: BTreeSet<CommandKey> = command_keys(tree, candidate, mode).into_iter().flatten().collect();
    let mut r = LineRatio::default();
    for key in command_keys(tree, reference, mode) {
        let key = key.map_err(|(line, text)| EvalError::UnparseableReference { line, text })?;
        r.total += 1;
        if candidates.contains(&key) {
            r.hits += 1;
        }
    }
    Ok(r)
}

/// Recall of reference commands at the template level: a reference line is
/// recalled when some candidate line matches the same command template.
pub fn command_match(tree: &VdmTree, reference: &str, candidate: &str, mode: CommandMatchMode) -> Result<f64, EvalError> {
    Ok(command_match_counts(tree, reference, candidate, mode)?.ratio())
}

pub const LINE_BREAK_TOKEN: &str = "<eol>";

/// Whitespace tokens per non-blank line, lines separated by a line-break token.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if !out.is_empty() {
            out.push(LINE_BREAK_TOKEN.to_string());
        }
        out.extend(line.split_whitespace().map(str::to_string));
    }
    out
}

/// Sufficient statistics for corpus BLEU-2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bleu2Stats {
    pub unigram_matches: usize,
    pub unigrams: usize,
    pub bigram_matches: usize,
    pub bigrams: usize,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn clipped<T: std::hash::Hash + Eq>(reference: impl Iterator<Item = T>, candidate: impl Iterator<Item = T>) -> (usize, usize) {
    let mut counts: HashMap<T, usize> = HashMap::new();
    for g in reference {
        *counts.entry(g).or_default() += 1;
    }
    let (mut matches, mut total) = (0, 0);
    for g in candidate {
        total += 1;
        if let Some(n) = counts.get_mut(&g).filter(|n| **n > 0) {
            *n -= 1;
            matches += 1;
        }
    }
    (matches, total)
}

impl Bleu2Stats {
    pub fn from_pair(reference: &str, candidate: &str) -> Self {
        let r = bleu_tokens(reference);
        let c = bleu_tokens(candidate);
        let (unigram_matches, unigrams) = clipped(r.iter(), c.iter());
        let (bigram_matches, bigrams) = clipped(r.windows(2), c.windows(2));
        Self {
            unigram_matches,
            unigrams,
            bigram_matches,
            bigrams,
            candidate_len: c.len(),
            reference_len: r.len(),
        }
    }

    pub fn add(&mut self, o: &Bleu2Stats) {
        self.unigram_matches += o.unigram_matches;
        self.unigrams += o.unigrams;
        self.bigram_matches += o.bigram_matches;
        self.bigrams += o.bigrams;
        self.candidate_len += o.candidate_len;
        self.reference_len += o.reference_len;
    }

    /// Geometric mean of unigram precision and add-one smoothed bigram
    /// precision, times the brevity penalty.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 || self.unigram_matches == 0 {
            return 0.0;
        }
        let p1 = self.unigram_matches as f64 / self.unigrams as f64;
        let p2 = (self.bigram_matches as f64 + 1.0) / (self.bigrams as f64 + 1.0);
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (0.5 * p1.ln() + 0.5 * p2.ln()).exp()
    }
}

pub fn bleu2(reference: &str, candidate: &str) -> f64 {
    Bleu2Stats::from_pair(reference, candidate).score()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallQuery {
    pub id: String,
    #[serde(default)]
    pub query: String,
    pub relevant: Vec<String>,
}

/// Fraction of queries with at least one relevant page in their top `k`.
pub fn recall_at_k(annotations: &[RecallQuery], results: &BTreeMap<String, Vec<String>>, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if annotations.is_empty() {
        return Ok(0.0);
    }
    let hits = annotations
        .iter()
        .filter(|q| {
            results
                .get(&q.id)
                .is_some_and(|list| list.iter().take(k).any(|id| q.relevant.contains(id)))
        })
        .count();
    Ok(hits as f64 / annotations.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    #[serde(default)]
    pub source: String,
    pub reference: String,
    pub candidate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub tree_match: f64,
    pub syntax_correctness: f64,
    pub bleu2: f64,
    pub exact_match: f64,
    pub command_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub id: String,
    pub lines: usize,
    pub metrics: MetricSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub summary: MetricSnapshot,
    pub cases: usize,
    pub rows: Vec<CaseRow>,
}

impl Evaluation {
    /// Per-case table plus an `overall` row, comma separated, 4 decimals.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let f = |x: f64| format!("{x:.4}");
        w.write_record(["id", "lines", "tree_match", "syntax_correctness", "bleu2", "exact_match", "command_match"])
            .expect("in-memory write");
        let rows = self
            .rows
            .iter()
            .map(|r| (r.id.as_str(), r.lines, r.metrics))
            .chain(std::iter::once(("overall", self.rows.iter().map(|r| r.lines).sum(), self.summary)));
        for (id, lines, m) in rows {
            w.write_record([
                id.to_string(),
                lines.to_string(),
                f(m.tree_match),
                f(m.syntax_correctness),
                f(m.bleu2),
                f(m.exact_match),
                f(m.command_match),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 table")
    }
}

/// Micro-averages line metrics over all cases and computes corpus BLEU-2.
pub fn evaluate(cases: &[EvalCase], tree: &VdmTree, mode: CommandMatchMode) -> Result<Evaluation, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let profile = &tree.profile;
    let (mut tm, mut sc, mut em, mut cm) = Default::default();
    let mut bleu = Bleu2Stats::default();
    let mut rows = Vec::new();
    for c in cases {
        let t = tree_match_counts(tree, &c.candidate);
        let s = syntax_correctness_counts(tree, &c.candidate);
        let e = exact_match_counts(profile, &c.reference, &c.candidate);
        let m = command_match_counts(tree, &c.reference, &c.candidate, mode).map_err(|err| EvalError::Case {
            case: c.id.clone(),
            source: Box::new(err),
        })?;
        let b = Bleu2Stats::from_pair(&c.reference, &c.candidate);
        LineRatio::add(&mut tm, t);
        LineRatio::add(&mut sc, s);
        LineRatio::add(&mut em, e);
        LineRatio::add(&mut cm, m);
        bleu.add(&b);
        rows.push(CaseRow {
            id: c.id.clone(),
            lines: t.total,
            metrics: MetricSnapshot {
                tree_match: t.ratio(),
                syntax_correctness: s.ratio(),
                bleu2: b.score(),
                exact_match: e.ratio(),
                command_match: m.ratio(),
            },
        });
    }
    Ok(Evaluation {
        summary: MetricSnapshot {
            tree_match: tm.ratio(),
            syntax_correctness: sc.ratio(),
            bleu2: bleu.score(),
            exact_match: em.ratio(),
            command_match: cm.ratio(),
        },
        cases: cases.len(),
        rows,
    })
}
