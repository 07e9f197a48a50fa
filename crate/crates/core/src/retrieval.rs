//! Intent-based retrieval of target-vendor manual pages.
//!
//! Configuration side: an LLM picks relevant directories of the target
//! configuration manual, the pages under them are ranked per intent by
//! embedding similarity, and the per-intent lists are combined by score
//! voting. Command side: BM25 pre-filter, per-intent embedding ranking,
//! voting, then merged with the scores propagated from the retrieved
//! configuration pages to the command pages they reference.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Bm25Params, CorpusError, ManualCorpus, ManualPage, PageKind};
use crate::pipeline::{Fragment, IntentSet};
use crate::providers::prompt::{PromptError, PromptLibrary};
use crate::providers::{ChatProvider, ChatRequest, EmbeddingProvider, EmbeddingVector, ProviderError, Providers};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no intents to retrieve with")]
    NoIntents,
    #[error("no candidate pages to rank")]
    NoCandidates,
    #[error("reply could not be parsed after a reprompt: {0:?}")]
    UnparseableReply(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub type Ranked = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub per_intent_top_k: usize,
    pub final_n: usize,
    pub bm25_top_n: usize,
    pub c2c_weight: f64,
    /// Voting weight of the general intent relative to detailed intents.
    #[serde(default = "unit")]
    pub general_intent_weight: f64,
    #[serde(default)]
    pub bm25: Bm25Params,
}

fn unit() -> f64 {
    1.0
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            per_intent_top_k: 15,
            final_n: 20,
            bm25_top_n: 200,
            c2c_weight: 1.0,
            general_intent_weight: 1.0,
            bm25: Bm25Params::default(),
        }
    }
}

/// Page id → cumulative non-negative score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoredManualSet {
    pub entries: BTreeMap<String, f64>,
}

impl ScoredManualSet {
    /// Adds `score` to `id`; negative contributions are clamped to zero.
    pub fn add(&mut self, id: &str, score: f64) {
        *self.entries.entry(id.to_string()).or_insert(0.0) += score.max(0.0);
    }

    pub fn get(&self, id: &str) -> f64 {
        self.entries.get(id).copied().unwrap_or(0.0)
    }

    pub fn merge(&mut self, other: &ScoredManualSet, weight: f64) {
        for (id, s) in &other.entries {
            self.add(id, s * weight);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted by score descending, then id ascending.
    pub fn ranked(&self) -> Ranked {
        let mut v: Ranked = self.entries.iter().map(|(k, s)| (k.clone(), *s)).collect();
        sort_ranked(&mut v);
        v
    }
}

pub fn sort_ranked(v: &mut Ranked) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub config_pages: Ranked,
    pub command_pages: Ranked,
    /// `config:<intent>` / `command:<intent>` → ranked list, for auditing.
    pub per_intent_lists: BTreeMap<String, Ranked>,
    pub selected_dirs: Vec<String>,
    pub dropped_dirs: Vec<String>,
    pub c2c_skipped: usize,
}

/// Embedding context of a page: title, description, directory path, and for
/// command pages the command templates; non-empty parts joined by newlines.
pub fn build_context(page: &ManualPage) -> String {
    let path = page.dir_path.join(" > ");
    let mut parts: Vec<&str> = vec![&page.title, &page.description, &path];
    if page.kind == PageKind::Command {
        parts.extend(page.commands.iter().map(String::as_str));
    }
    parts.into_iter().filter(|p| !p.trim().is_empty()).collect::<Vec<_>>().join("\n")
}

/// Page rendering used inside prompts.
pub fn render_page(page: &ManualPage) -> String {
    let mut s = format!("[{}] {}\npath: {}\n", page.id, page.title, page.dir_path.join(" > "));
    if !page.description.trim().is_empty() {
        s.push_str(&format!("description: {}\n", page.description.trim()));
    }
    if !page.commands.is_empty() {
        s.push_str("commands:\n");
        for c in &page.commands {
            s.push_str(&format!("  {c}\n"));
        }
    }
    if !page.body.trim().is_empty() {
        s.push_str(page.body.trim_end());
        s.push('\n');
    }
    s
}

pub fn render_pages<'a>(pages: impl IntoIterator<Item = &'a ManualPage>) -> String {
    let rendered: Vec<String> = pages.into_iter().map(render_page).collect();
    if rendered.is_empty() {
        "(none)".to_string()
    } else {
        rendered.join("\n")
    }
}

/// Pulls a JSON list of strings out of a reply: whole reply, fenced block, or first `[..]` span.
fn parse_string_list(reply: &str) -> Option<Vec<String>> {
    let candidates = [
        Some(reply.trim().to_string()),
        crate::pipeline::first_code_block(reply),
        reply.find('[').zip(reply.rfind(']')).filter(|(a, b)| a < b).map(|(a, b)| reply[a..=b].to_string()),
    ];
    candidates
        .into_iter()
        .flatten()
        .find_map(|c| serde_json::from_str::<Vec<String>>(c.trim()).ok())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterOutcome {
    pub selected: Vec<Vec<String>>,
    pub dropped: Vec<String>,
}

/// Everything retrieval needs besides the providers.
pub struct RetrievalContext<'a> {
    pub source_corpus: &'a ManualCorpus,
    pub target_corpus: &'a ManualCorpus,
    pub prompts: &'a PromptLibrary,
    pub source_vendor: &'a str,
    pub target_vendor: &'a str,
}

/// Asks the LLM to pick first+second level directories of the target
/// configuration manual. Entries are listed as `level1/level2`; unknown
/// entries in the reply are dropped.
pub fn llm_filter_config_dirs(
    chat: &dyn ChatProvider,
    ctx: &RetrievalContext<'_>,
    fragment: &Fragment,
    intent: &IntentSet,
    source_pages: &[&ManualPage],
    directory: &[Vec<String>],
) -> Result<FilterOutcome, RetrievalError> {
    if directory.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let labels: BTreeMap<String, &Vec<String>> = directory.iter().map(|d| (d.join("/"), d)).collect();
    let listing = directory.iter().map(|d| format!("- {}", d.join("/"))).collect::<Vec<_>>().join("\n");
    let prompt = ctx.prompts.llm_filter.render_with(&[
        ("source_vendor", ctx.source_vendor),
        ("target_vendor", ctx.target_vendor),
        ("intent", &intent.describe()),
        ("fragment", &fragment.text),
        ("manuals", &render_pages(source_pages.iter().copied())),
        ("directory", &listing),
    ])?;
    let system = ctx.prompts.system.render_with(&[])?;
    let request = ChatRequest::new(system, prompt);
    let reply = chat.chat(&request)?;
    let entries = match parse_string_list(&reply) {
        Some(e) => e,
        None => {
            let retry = request.follow_up(&reply, ctx.prompts.filter_retry.render_with(&[])?);
            let second = chat.chat(&retry)?;
            parse_string_list(&second).ok_or(RetrievalError::UnparseableReply(second))?
        }
    };
    let mut out = FilterOutcome::default();
    let mut seen = BTreeSet::new();
    for e in entries {
        let key = e.trim().trim_matches('/').to_string();
        match labels.get(&key) {
            Some(prefix) if seen.insert(key.clone()) => out.selected.push((*prefix).clone()),
            Some(_) => {}
            None => {
                log::warn!("directory filter returned unknown entry {e:?}; dropped");
                out.dropped.push(e);
            }
        }
    }
    Ok(out)
}

fn rank_vectors(query: &EmbeddingVector, candidates: &[(String, EmbeddingVector)], top_k: usize) -> Result<Ranked, RetrievalError> {
    let mut ranked = Ranked::with_capacity(candidates.len());
    for (id, v) in candidates {
        ranked.push((id.clone(), query.cosine(v)?));
    }
    sort_ranked(&mut ranked);
    ranked.truncate(top_k);
    Ok(ranked)
}

fn embed_candidates(
    embedder: &dyn EmbeddingProvider,
    candidates: &[String],
    corpus: &ManualCorpus,
) -> Result<Vec<(String, EmbeddingVector)>, RetrievalError> {
    let pages: Vec<&ManualPage> = candidates.iter().filter_map(|id| corpus.page(id)).collect();
    if pages.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let contexts: Vec<String> = pages.iter().map(|p| build_context(p)).collect();
    let vectors = embedder.embed(&contexts)?;
    Ok(pages.iter().map(|p| p.id.clone()).zip(vectors).collect())
}

/// Cosine similarity between the query and each candidate's context; best `top_k`.
pub fn embed_rank(
    embedder: &dyn EmbeddingProvider,
    query: &str,
    candidates: &[String],
    corpus: &ManualCorpus,
    top_k: usize,
) -> Result<Ranked, RetrievalError> {
    let cands = embed_candidates(embedder, candidates, corpus)?;
    let q = embedder.embed(&[query.to_string()])?.remove(0);
    rank_vectors(&q, &cands, top_k)
}

/// Top-`k` pages of the whole corpus by embedding similarity to `query`.
pub fn relevant_manuals(
    embedder: &dyn EmbeddingProvider,
    corpus: &ManualCorpus,
    query: &str,
    k: usize,
) -> Result<Vec<String>, RetrievalError> {
    if query.trim().is_empty() || corpus.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let ids: Vec<String> = corpus.pages().map(|p| p.id.clone()).collect();
    Ok(embed_rank(embedder, query, &ids, corpus, k)?.into_iter().map(|(id, _)| id).collect())
}

/// Weighted voting: each page's score is the sum of its scores across lists.
pub fn vote(per_intent_lists: &BTreeMap<String, Ranked>) -> ScoredManualSet {
    vote_weighted(per_intent_lists, |_| 1.0)
}

pub fn vote_weighted(per_intent_lists: &BTreeMap<String, Ranked>, weight: impl Fn(&str) -> f64) -> ScoredManualSet {
    let mut out = ScoredManualSet::default();
    for (intent, list) in per_intent_lists {
        let w = weight(intent);
        for (id, s) in list {
            out.add(id, s * w);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct C2cOutcome {
    pub scores: ScoredManualSet,
    /// Referenced commands that resolve to no command page.
    pub skipped: usize,
}

/// Propagates each configuration page's score to the command page of every
/// command it references.
pub fn config_to_command(retrieved_config_pages: &ScoredManualSet, corpus: &ManualCorpus) -> C2cOutcome {
    let mut out = C2cOutcome::default();
    for (page_id, score) in &retrieved_config_pages.entries {
        let Some(page) = corpus.page(page_id) else {
            log::warn!("configuration page {page_id} not in corpus");
            continue;
        };
        for command in &page.commands {
            match corpus.resolve_command(command) {
                Some(cmd_page) => out.scores.add(cmd_page, *score),
                None => out.skipped += 1,
            }
        }
    }
    out
}

fn intent_queries(intents: &IntentSet) -> Vec<(String, String)> {
    let mut q = Vec::new();
    if !intents.general.trim().is_empty() {
        q.push(("general".to_string(), intents.general.clone()));
    }
    for (i, d) in intents.detailed.iter().enumerate() {
        if !d.trim().is_empty() {
            q.push((format!("detailed.{}", i + 1), d.clone()));
        }
    }
    q
}

fn per_intent(
    embedder: &dyn EmbeddingProvider,
    queries: &[(String, String)],
    candidates: &[(String, EmbeddingVector)],
    top_k: usize,
) -> Result<BTreeMap<String, Ranked>, RetrievalError> {
    let texts: Vec<String> = queries.iter().map(|(_, t)| t.clone()).collect();
    let vectors = embedder.embed(&texts)?;
    let mut lists = BTreeMap::new();
    for ((id, _), v) in queries.iter().zip(vectors) {
        lists.insert(id.clone(), rank_vectors(&v, candidates, top_k)?);
    }
    Ok(lists)
}

/// Full retrieval for one fragment.
pub fn retrieve(
    providers: Providers<'_>,
    ctx: &RetrievalContext<'_>,
    fragment: &Fragment,
    intents: &IntentSet,
    params: &RetrievalParams,
) -> Result<RetrievalResult, RetrievalError> {
    let queries = intent_queries(intents);
    if queries.is_empty() {
        return Err(RetrievalError::NoIntents);
    }
    let weight = |intent: &str| if intent == "general" { params.general_intent_weight } else { 1.0 };
    let corpus = ctx.target_corpus;
    let mut result = RetrievalResult::default();

    // configuration manuals
    let directory = corpus.directory_entries(PageKind::Configuration);
    let mut config_votes = ScoredManualSet::default();
    if !directory.is_empty() {
        let source_pages: Vec<&ManualPage> =
            fragment.manual_page_ids.iter().filter_map(|id| ctx.source_corpus.page(id)).collect();
        let filter = llm_filter_config_dirs(providers.chat, ctx, fragment, intents, &source_pages, &directory)?;
        result.selected_dirs = filter.selected.iter().map(|d| d.join("/")).collect();
        result.dropped_dirs = filter.dropped;
        let mut candidates: BTreeSet<String> = filter
            .selected
            .iter()
            .flat_map(|prefix| corpus.subtree_pages(prefix))
            .filter(|id| corpus.page(id).is_some_and(|p| p.kind == PageKind::Configuration))
            .collect();
        if candidates.is_empty() {
            log::warn!("fragment {}: no directory selected; ranking all configuration pages", fragment.id);
            candidates = corpus.pages_of_kind(PageKind::Configuration).map(|p| p.id.clone()).collect();
        }
        let candidates: Vec<String> = candidates.into_iter().collect();
        let vectors = embed_candidates(providers.embed, &candidates, corpus)?;
        let lists = per_intent(providers.embed, &queries, &vectors, params.per_intent_top_k)?;
        config_votes = vote_weighted(&lists, weight);
        for (k, v) in lists {
            result.per_intent_lists.insert(format!("config:{k}"), v);
        }
    }
    let mut config_ranked = config_votes.ranked();
    config_ranked.truncate(params.final_n);
    result.config_pages = config_ranked;

    // command manuals
    if corpus.pages_of_kind(PageKind::Command).next().is_some() {
        let query = queries.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join(" ");
        let prefiltered: Vec<String> = corpus
            .bm25_rank(PageKind::Command, &query, params.bm25, params.bm25_top_n.max(1))?
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        let vectors = embed_candidates(providers.embed, &prefiltered, corpus)?;
        let lists = per_intent(providers.embed, &queries, &vectors, params.per_intent_top_k)?;
        let mut command_votes = vote_weighted(&lists, weight);
        for (k, v) in lists {
            result.per_intent_lists.insert(format!("command:{k}"), v);
        }
        let retrieved_config = ScoredManualSet {
            entries: result.config_pages.iter().cloned().collect(),
        };
        let c2c = config_to_command(&retrieved_config, corpus);
        result.c2c_skipped = c2c.skipped;
        command_votes.merge(&c2c.scores, params.c2c_weight);
        let mut ranked = command_votes.ranked();
        ranked.truncate(params.final_n);
        result.command_pages = ranked;
    }
    Ok(result)
}
