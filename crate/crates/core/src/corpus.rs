//! Manual corpus: configuration- and command-manual pages, the directory
//! tree they live in, the command-template → command-page index, and a BM25
//! inverted index used to pre-filter command manuals.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::normalize_ws;
use crate::template::{parse_template, CommandGraph, TemplateConvention};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate page id {0:?}")]
    DuplicateId(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no pages of kind {0:?}")]
    EmptyCorpus(PageKind),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PageKind {
    Configuration,
    Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualPage {
    pub id: String,
    pub kind: PageKind,
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub dir_path: Vec<String>,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub commands: Vec<String>,
}

impl ManualPage {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.id.trim().is_empty() {
            return Err(CorpusError::Schema("page with empty id".into()));
        }
        if self.dir_path.is_empty() {
            return Err(CorpusError::Schema(format!("{}: dir_path must not be empty", self.id)));
        }
        if self.kind == PageKind::Command && self.commands.is_empty() {
            return Err(CorpusError::Schema(format!("{}: command page without commands", self.id)));
        }
        Ok(())
    }
}

/// One level of the manual directory tree.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirNode {
    pub children: BTreeMap<String, DirNode>,
    /// Pages whose `dir_path` ends exactly here.
    pub pages: Vec<String>,
}

impl DirNode {
    fn insert(&mut self, path: &[String], id: &str) {
        match path.split_first() {
            None => self.pages.push(id.to_string()),
            Some((head, rest)) => self.children.entry(head.clone()).or_default().insert(rest, id),
        }
    }

    /// Indented outline, one directory per line, two spaces per level.
    pub fn outline(&self) -> String {
        fn walk(node: &DirNode, depth: usize, out: &mut String) {
            for (name, child) in &node.children {
                let _ = writeln!(out, "{}{} ({})", "  ".repeat(depth), name, child.pages.len());
                walk(child, depth + 1, out);
            }
        }
        let mut out = String::new();
        walk(self, 0, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Canonical spelling of a command template used as the command-index key:
/// whitespace collapsed, no spaces just inside meta delimiters.
pub fn normalize_command(template: &str) -> String {
    let collapsed = normalize_ws(template);
    let chars: Vec<char> = collapsed.chars().collect();
    let mut out = String::with_capacity(collapsed.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == ' ' {
            let prev = out.chars().last();
            let next = chars.get(i + 1).copied();
            if matches!(prev, Some('{' | '[' | '|' | '<')) || matches!(next, Some('}' | ']' | '|' | '>')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, Default)]
struct Bm25Index {
    doc_ids: Vec<String>,
    doc_len: Vec<usize>,
    avg_len: f64,
    postings: HashMap<String, Vec<(usize, usize)>>,
}

impl Bm25Index {
    fn build<'a>(pages: impl Iterator<Item = &'a ManualPage>) -> Self {
        let mut idx = Bm25Index::default();
        for page in pages {
            let doc = idx.doc_ids.len();
            let tokens = tokenize(&bm25_text(page));
            let mut tf: BTreeMap<String, usize> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                idx.postings.entry(term).or_default().push((doc, count));
            }
            idx.doc_ids.push(page.id.clone());
            idx.doc_len.push(tokens.len());
        }
        let total: usize = idx.doc_len.iter().sum();
        idx.avg_len = if idx.doc_ids.is_empty() {
            0.0
        } else {
            total as f64 / idx.doc_ids.len() as f64
        };
        idx
    }
}

/// Text indexed by BM25: title, description and command templates.
pub fn bm25_text(page: &ManualPage) -> String {
    let mut parts = vec![page.title.as_str(), page.description.as_str()];
    parts.extend(page.commands.iter().map(String::as_str));
    parts.join("\n")
}

#[derive(Debug, Clone, Default)]
pub struct ManualCorpus {
    pages: BTreeMap<String, ManualPage>,
    command_index: BTreeMap<String, String>,
    directory: DirNode,
    compiled: Vec<(String, CommandGraph)>,
    bm25: BTreeMap<PageKind, Bm25Index>,
}

impl PartialEq for ManualCorpus {
    fn eq(&self, other: &Self) -> bool {
        self.pages == other.pages
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    pages: Vec<ManualPage>,
}

impl ManualCorpus {
    pub fn ingest(records: impl IntoIterator<Item = ManualPage>) -> Result<Self, CorpusError> {
        let mut pages = BTreeMap::new();
        for page in records {
            page.validate()?;
            if pages.contains_key(&page.id) {
                return Err(CorpusError::DuplicateId(page.id));
            }
            pages.insert(page.id.clone(), page);
        }
        let conv = TemplateConvention::default();
        let mut corpus = ManualCorpus::default();
        for page in pages.values() {
            corpus.directory.insert(&page.dir_path, &page.id);
            if page.kind == PageKind::Command {
                for cmd in &page.commands {
                    corpus
                        .command_index
                        .entry(normalize_command(cmd))
                        .or_insert_with(|| page.id.clone());
                    match parse_template(cmd, &conv) {
                        Ok(g) => corpus.compiled.push((page.id.clone(), g)),
                        Err(e) => log::warn!("page {}: template {cmd:?} does not compile: {e}", page.id),
                    }
                }
            }
        }
        for kind in [PageKind::Configuration, PageKind::Command] {
            corpus
                .bm25
                .insert(kind, Bm25Index::build(pages.values().filter(|p| p.kind == kind)));
        }
        corpus.pages = pages;
        Ok(corpus)
    }

    /// Parses a JSON array of records, a single record, or JSON lines.
    pub fn parse_records(text: &str) -> Result<Vec<ManualPage>, CorpusError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('[') {
            return serde_json::from_str(trimmed).map_err(|e| CorpusError::Schema(e.to_string()));
        }
        if let Ok(file) = serde_json::from_str::<CorpusFile>(trimmed) {
            return Ok(file.pages);
        }
        if let Ok(page) = serde_json::from_str::<ManualPage>(trimmed) {
            return Ok(vec![page]);
        }
        trimmed
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| CorpusError::Schema(format!("line {}: {e}", i + 1)))
            })
            .collect()
    }

    /// Ingests every `*.json` / `*.jsonl` file of a directory, in file-name order.
    pub fn ingest_dir(dir: &Path) -> Result<Self, CorpusError> {
        let io = |e, p: &Path| CorpusError::Io {
            path: p.display().to_string(),
            source: e,
        };
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| io(e, dir))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")))
            .collect();
        files.sort();
        let mut records = Vec::new();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| io(e, &f))?;
            let parsed = Self::parse_records(&text)
                .map_err(|e| CorpusError::Schema(format!("{}: {e}", f.display())))?;
            records.extend(parsed);
        }
        Self::ingest(records)
    }

    /// Loads a corpus file written by [`ManualCorpus::to_json`].
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        Self::ingest(Self::parse_records(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = CorpusFile {
            pages: self.pages.values().cloned().collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("corpus serializes");
        s.push('\n');
        s
    }

    pub fn page(&self, id: &str) -> Option<&ManualPage> {
        self.pages.get(id)
    }

    pub fn pages(&self) -> impl Iterator<Item = &ManualPage> {
        self.pages.values()
    }

    pub fn pages_of_kind(&self, kind: PageKind) -> impl Iterator<Item = &ManualPage> {
        self.pages.values().filter(move |p| p.kind == kind)
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn command_index(&self) -> &BTreeMap<String, String> {
        &self.command_index
    }

    pub fn directory(&self) -> &DirNode {
        &self.directory
    }

    /// Maps a command (template text or concrete line) to its command page:
    /// exact normalized template lookup first, then grammar matching.
    pub fn resolve_command(&self, command: &str) -> Option<&str> {
        if let Some(id) = self.command_index.get(&normalize_command(command)) {
            return Some(id);
        }
        self.compiled
            .iter()
            .find(|(_, g)| g.match_line(command).matched)
            .map(|(id, _)| id.as_str())
    }

    /// Ids of all pages whose `dir_path` starts with `prefix`, ascending.
    pub fn subtree_pages(&self, prefix: &[String]) -> Vec<String> {
        self.pages
            .values()
            .filter(|p| p.dir_path.starts_with(prefix))
            .map(|p| p.id.clone())
            .collect()
    }

    /// Distinct first+second level directory prefixes of pages of `kind`.
    pub fn directory_entries(&self, kind: PageKind) -> Vec<Vec<String>> {
        let set: BTreeSet<Vec<String>> = self
            .pages_of_kind(kind)
            .map(|p| p.dir_path.iter().take(2).cloned().collect())
            .collect();
        set.into_iter().collect()
    }

    /// BM25 over title, description and commands of pages of `kind`.
    /// Scores descend; ties are broken by ascending page id.
    pub fn bm25_rank(
        &self,
        kind: PageKind,
        query: &str,
        params: Bm25Params,
        top_n: usize,
    ) -> Result<Vec<(String, f64)>, CorpusError> {
        if top_n == 0 {
            return Err(CorpusError::InvalidArgument("top_n must be at least 1".into()));
        }
        if !(params.k1 >= 0.0 && (0.0..=1.0).contains(&params.b)) {
            return Err(CorpusError::InvalidArgument(format!("bad BM25 parameters {params:?}")));
        }
        let index = match self.bm25.get(&kind) {
            Some(ix) if !ix.doc_ids.is_empty() => ix,
            _ => return Err(CorpusError::EmptyCorpus(kind)),
        };
        let n = index.doc_ids.len() as f64;
        let avg = if index.avg_len > 0.0 { index.avg_len } else { 1.0 };
        let mut scores = vec![0.0f64; index.doc_ids.len()];
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        for term in &terms {
            let Some(postings) = index.postings.get(term) else {
                continue;
            };
            let df = postings.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for &(doc, tf) in postings {
                let tf = tf as f64;
                let norm = params.k1 * (1.0 - params.b + params.b * index.doc_len[doc] as f64 / avg);
                scores[doc] += idf * tf * (params.k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(String, f64)> = index.doc_ids.iter().cloned().zip(scores).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(top_n);
        Ok(ranked)
    }
}
