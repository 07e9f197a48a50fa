//! Translation orchestration: division of the source configuration into
//! fragments with intents, per-fragment retrieval and translation, and the
//! checker-guided syntax refinement loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ManualCorpus;
use crate::hierarchy::{LineStatus, LineVerdict, VdmTree};
use crate::providers::prompt::{PromptError, PromptLibrary};
use crate::providers::{sha256_hex, ChatProvider, ChatRequest, ProviderError, Providers};
use crate::retrieval::{self, render_pages, RetrievalContext, RetrievalError, RetrievalParams, RetrievalResult};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("fragment {0}: reply contained no fenced code block after a reprompt")]
    NoCodeBlock(String),
    #[error("unknown fragment {0}")]
    UnknownFragment(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

impl PipelineError {
    /// True when the failure came from a chat or embedding backend.
    pub fn is_provider_failure(&self) -> bool {
        matches!(
            self,
            PipelineError::Provider(_) | PipelineError::Retrieval(RetrievalError::Provider(_))
        )
    }
}

/// Extracts the body of the first fenced code block, dropping the info string.
pub fn first_code_block(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```")?;
    let block = body[..end].trim_end_matches([' ', '\t']);
    Some(block.strip_suffix('\n').unwrap_or(block).to_string())
}

fn system_prompt(prompts: &PromptLibrary) -> Result<String, PromptError> {
    prompts.system.render_with(&[])
}

/// Parsed source configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    pub vendor: String,
    pub lines: Vec<String>,
    pub verdicts: Vec<LineVerdict>,
    /// line number → command page id, for matched lines with a known page.
    pub source_pages: BTreeMap<usize, String>,
    /// line number → name of the view the line enters.
    pub opened_views: BTreeMap<usize, String>,
}

impl ConfigDocument {
    pub fn parse(text: &str, tree: &VdmTree, corpus: &ManualCorpus) -> Self {
        let verdicts = tree.check_config(text);
        let mut source_pages = BTreeMap::new();
        let mut opened_views = BTreeMap::new();
        for v in &verdicts {
            if v.status != LineStatus::Matched {
                continue;
            }
            let node = tree.node(v.matched_node.expect("matched lines carry a node"));
            if let Some(page) = corpus.resolve_command(&node.cli).or_else(|| corpus.resolve_command(&v.text)) {
                source_pages.insert(v.line_no, page.to_string());
            }
            if node.id != tree.root() && node.enters_view() {
                if let Some(view) = tree.entered_view(node.id) {
                    opened_views.insert(v.line_no, view.to_string());
                }
            }
        }
        Self {
            vendor: tree.profile.name.clone(),
            lines: text.lines().map(str::to_string).collect(),
            verdicts,
            source_pages,
            opened_views,
        }
    }

    pub fn is_structural(&self, line_no: usize) -> bool {
        self.verdicts[line_no - 1].status == LineStatus::Structural
    }

    /// Line numbers of non-structural lines.
    pub fn content_lines(&self) -> Vec<usize> {
        self.verdicts
            .iter()
            .filter(|v| v.status != LineStatus::Structural)
            .map(|v| v.line_no)
            .collect()
    }

    /// Configuration with `L<n>: ` prefixes, as shown to the model.
    pub fn numbered(&self) -> String {
        self.lines
            .iter()
            .enumerate()
            .map(|(i, l)| format!("L{}: {}", i + 1, l))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn pages_in(&self, first: usize, last: usize) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.source_pages
            .range(first..=last)
            .filter(|(_, p)| seen.insert(p.as_str()))
            .map(|(_, p)| p.clone())
            .collect()
    }

    fn fragment(&self, id: String, first: usize, last: usize) -> Fragment {
        let text = (first..=last)
            .filter(|n| !self.is_structural(*n))
            .map(|n| self.lines[n - 1].as_str())
            .collect::<Vec<_>>()
            .join("\n");
        Fragment {
            id,
            line_range: (first, last),
            text,
            manual_page_ids: self.pages_in(first, last),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub id: String,
    /// Inclusive 1-based source line span.
    pub line_range: (usize, usize),
    /// Non-structural source lines of the span.
    pub text: String,
    pub manual_page_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSet {
    pub fragment_id: String,
    pub general: String,
    pub detailed: Vec<String>,
}

impl IntentSet {
    pub fn describe(&self) -> String {
        let mut s = self.general.clone();
        for d in &self.detailed {
            s.push_str("\n- ");
            s.push_str(d);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Division {
    pub pairs: Vec<(Fragment, IntentSet)>,
    /// Why the fallback division was used, when it was.
    pub degraded: Option<String>,
    /// Prompt id and reply digest of every division call.
    pub calls: Vec<(String, String)>,
}

#[derive(Debug, Deserialize)]
struct RawFragment {
    lines: (usize, usize),
    general_intent: String,
    #[serde(default)]
    detailed_intents: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawDivision {
    fragments: Vec<RawFragment>,
}

fn json_candidates(reply: &str, open: char, close: char) -> Vec<String> {
    let mut c = vec![reply.trim().to_string()];
    c.extend(first_code_block(reply));
    if let (Some(a), Some(b)) = (reply.find(open), reply.rfind(close)) {
        if a < b {
            c.push(reply[a..=b].to_string());
        }
    }
    c
}

/// Parses a division reply and checks that it partitions the content lines.
fn parse_division(reply: &str, doc: &ConfigDocument) -> Result<Vec<(Fragment, IntentSet)>, String> {
    let raw = json_candidates(reply, '{', '}')
        .iter()
        .find_map(|c| serde_json::from_str::<RawDivision>(c).ok())
        .ok_or_else(|| "the reply is not a JSON object with a \"fragments\" list".to_string())?;
    if raw.fragments.is_empty() {
        return Err("no fragments were given".into());
    }
    let n = doc.lines.len();
    let mut covered = BTreeSet::new();
    let mut prev_last = 0;
    let mut out = Vec::new();
    for (i, f) in raw.fragments.iter().enumerate() {
        let (first, last) = f.lines;
        if first == 0 || last < first || last > n {
            return Err(format!("fragment {} has invalid line range [{first}, {last}]", i + 1));
        }
        if first <= prev_last {
            return Err(format!("fragment {} overlaps or precedes the previous fragment", i + 1));
        }
        if f.general_intent.trim().is_empty() {
            return Err(format!("fragment {} has an empty general intent", i + 1));
        }
        let content: Vec<usize> = (first..=last).filter(|l| !doc.is_structural(*l)).collect();
        if content.is_empty() {
            return Err(format!("fragment {} contains no configuration lines", i + 1));
        }
        covered.extend(content);
        prev_last = last;
        let id = format!("f{}", i + 1);
        out.push((
            doc.fragment(id.clone(), first, last),
            IntentSet {
                fragment_id: id,
                general: f.general_intent.trim().to_string(),
                detailed: f.detailed_intents.iter().map(|d| d.trim().to_string()).filter(|d| !d.is_empty()).collect(),
            },
        ));
    }
    let missing: Vec<String> = doc
        .content_lines()
        .into_iter()
        .filter(|l| !covered.contains(l))
        .map(|l| l.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(format!("lines {} are not covered by any fragment", missing.join(", ")));
    }
    Ok(out)
}

/// One fragment per top-level view block; consecutive top-level lines that
/// open no view are grouped together.
pub fn fallback_division(doc: &ConfigDocument, root_view: &str) -> Vec<(Fragment, IntentSet)> {
    let mut blocks: Vec<(String, usize, usize)> = Vec::new();
    let mut leaf_open = false;
    for v in doc.verdicts.iter().filter(|v| v.status != LineStatus::Structural) {
        let top = v.view_path.len() <= 1;
        match doc.opened_views.get(&v.line_no) {
            Some(view) if top => {
                blocks.push((view.clone(), v.line_no, v.line_no));
                leaf_open = false;
            }
            _ if top && !leaf_open => {
                blocks.push((root_view.to_string(), v.line_no, v.line_no));
                leaf_open = true;
            }
            _ if blocks.is_empty() => {
                blocks.push((root_view.to_string(), v.line_no, v.line_no));
                leaf_open = true;
            }
            _ => blocks.last_mut().expect("non-empty").2 = v.line_no,
        }
    }
    blocks
        .into_iter()
        .enumerate()
        .map(|(i, (view, first, last))| {
            let id = format!("f{}", i + 1);
            (
                doc.fragment(id.clone(), first, last),
                IntentSet {
                    fragment_id: id,
                    general: format!("configure {view}"),
                    detailed: Vec::new(),
                },
            )
        })
        .collect()
}

/// Prompts for a division with intents, validates the partition, reprompts
/// once, and falls back to the view-block division on a second failure.
pub fn divide_and_extract(
    chat: &dyn ChatProvider,
    prompts: &PromptLibrary,
    doc: &ConfigDocument,
    corpus_src: &ManualCorpus,
    root_view: &str,
) -> Result<Division, PipelineError> {
    let mut division = Division::default();
    if doc.content_lines().is_empty() {
        return Ok(division);
    }
    let pages: BTreeSet<&String> = doc.source_pages.values().collect();
    let manuals = render_pages(pages.into_iter().filter_map(|id| corpus_src.page(id)));
    let examples = prompts.intent_examples.render_with(&[])?;
    let prompt = prompts.intent_extraction.render_with(&[
        ("source_vendor", &doc.vendor),
        ("examples", &examples),
        ("manuals", &manuals),
        ("config", &doc.numbered()),
    ])?;
    let request = ChatRequest::new(system_prompt(prompts)?, prompt);
    let reply = chat.chat(&request)?;
    division.calls.push(("intent_extraction".into(), sha256_hex(reply.as_bytes())));
    let problem = match parse_division(&reply, doc) {
        Ok(pairs) => {
            division.pairs = pairs;
            return Ok(division);
        }
        Err(p) => p,
    };
    log::warn!("division reply rejected: {problem}");
    let retry = request.follow_up(&reply, prompts.division_retry.render_with(&[("problem", &problem)])?);
    let second = chat.chat(&retry)?;
    division.calls.push(("division_retry".into(), sha256_hex(second.as_bytes())));
    match parse_division(&second, doc) {
        Ok(pairs) => division.pairs = pairs,
        Err(p) => {
            log::warn!("division reply rejected again ({p}); using view-block fallback");
            division.pairs = fallback_division(doc, root_view);
            division.degraded = Some(p);
        }
    }
    Ok(division)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: usize,
    pub fragment_id: String,
    pub prompt_id: String,
    pub reply_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors_before: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors_after: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adopted: Option<bool>,
}

impl HistoryEntry {
    fn call(round: usize, fragment_id: &str, prompt_id: &str, reply: &str) -> Self {
        Self {
            round,
            fragment_id: fragment_id.to_string(),
            prompt_id: prompt_id.to_string(),
            reply_digest: sha256_hex(reply.as_bytes()),
            errors_before: None,
            errors_after: None,
            adopted: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TranslationState {
    /// sha256 of the source configuration text.
    pub source_digest: String,
    pub divided: bool,
    pub fragments: Vec<Fragment>,
    pub intents: Vec<IntentSet>,
    pub translated: BTreeMap<String, String>,
    pub retrievals: BTreeMap<String, RetrievalResult>,
    pub history: Vec<HistoryEntry>,
    pub final_text: String,
    pub degraded: Vec<String>,
}

/// Inclusive 1-based line span of a fragment inside the assembled text;
/// `first > last` for an empty translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub first: usize,
    pub last: usize,
}

impl Span {
    pub fn contains(&self, line: usize) -> bool {
        self.first <= line && line <= self.last
    }
}

impl TranslationState {
    pub fn new(source_text: &str) -> Self {
        Self {
            source_digest: sha256_hex(source_text.as_bytes()),
            ..Self::default()
        }
    }

    pub fn fragment(&self, id: &str) -> Option<&Fragment> {
        self.fragments.iter().find(|f| f.id == id)
    }

    pub fn intents_for(&self, id: &str) -> Option<&IntentSet> {
        self.intents.iter().find(|i| i.fragment_id == id)
    }

    /// In-order concatenation of translated fragments plus each fragment's span.
    pub fn assemble(&self) -> (String, BTreeMap<String, Span>) {
        let mut lines: Vec<&str> = Vec::new();
        let mut spans = BTreeMap::new();
        for f in &self.fragments {
            let Some(t) = self.translated.get(&f.id) else {
                continue;
            };
            let first = lines.len() + 1;
            lines.extend(t.lines());
            spans.insert(f.id.clone(), Span { first, last: lines.len() });
        }
        (lines.join("\n"), spans)
    }

    /// Translation of the fragments before `id`.
    pub fn preceding_text(&self, id: &str) -> String {
        let mut lines: Vec<&str> = Vec::new();
        for f in self.fragments.iter().take_while(|f| f.id != id) {
            if let Some(t) = self.translated.get(&f.id) {
                lines.extend(t.lines());
            }
        }
        lines.join("\n")
    }

    fn set_translation(&mut self, id: &str, text: String) {
        self.translated.insert(id.to_string(), text);
        self.final_text = self.assemble().0;
    }

    pub fn is_complete(&self) -> bool {
        self.divided && self.fragments.iter().all(|f| self.translated.contains_key(&f.id))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("state serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let err = |e: std::io::Error| PipelineError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()).map_err(err)?;
        std::fs::rename(&tmp, path).map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let err = |message: String| PipelineError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

/// Corpora, trees and prompts shared by every stage of a run.
#[derive(Clone, Copy)]
pub struct PipelineContext<'a> {
    pub prompts: &'a PromptLibrary,
    pub source_tree: &'a VdmTree,
    pub target_tree: &'a VdmTree,
    pub source_corpus: &'a ManualCorpus,
    pub target_corpus: &'a ManualCorpus,
}

impl<'a> PipelineContext<'a> {
    pub fn source_vendor(&self) -> &'a str {
        &self.source_tree.profile.name
    }

    pub fn target_vendor(&self) -> &'a str {
        &self.target_tree.profile.name
    }

    pub fn retrieval(&self) -> RetrievalContext<'a> {
        RetrievalContext {
            source_corpus: self.source_corpus,
            target_corpus: self.target_corpus,
            prompts: self.prompts,
            source_vendor: self.source_vendor(),
            target_vendor: self.target_vendor(),
        }
    }
}

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        "(none)"
    } else {
        s
    }
}

/// Translates one fragment given everything translated before it and
/// records the translation in `state`.
pub fn translate_fragment(
    chat: &dyn ChatProvider,
    ctx: &PipelineContext<'_>,
    state: &mut TranslationState,
    fragment_id: &str,
    retrieval: &RetrievalResult,
) -> Result<String, PipelineError> {
    let fragment = state
        .fragment(fragment_id)
        .cloned()
        .ok_or_else(|| PipelineError::UnknownFragment(fragment_id.to_string()))?;
    let intent = state.intents_for(fragment_id).map(IntentSet::describe).unwrap_or_default();
    let profile = &ctx.target_tree.profile;
    let source_manuals = render_pages(fragment.manual_page_ids.iter().filter_map(|id| ctx.source_corpus.page(id)));
    let config_manuals = render_pages(retrieval.config_pages.iter().filter_map(|(id, _)| ctx.target_corpus.page(id)));
    let command_manuals = render_pages(retrieval.command_pages.iter().filter_map(|(id, _)| ctx.target_corpus.page(id)));
    let previous = state.preceding_text(fragment_id);
    let prompt = ctx.prompts.translation.render_with(&[
        ("source_vendor", ctx.source_vendor()),
        ("target_vendor", ctx.target_vendor()),
        ("conventions", &profile.convention.describe()),
        ("exit_token", &profile.exit_tokens[0]),
        ("intent", &intent),
        ("source_manuals", &source_manuals),
        ("target_config_manuals", &config_manuals),
        ("target_command_manuals", &command_manuals),
        ("previous_translation", or_none(&previous)),
        ("fragment", &fragment.text),
    ])?;
    let request = ChatRequest::new(system_prompt(ctx.prompts)?, prompt);
    let reply = chat.chat(&request)?;
    state.history.push(HistoryEntry::call(0, fragment_id, "translation", &reply));
    let text = match first_code_block(&reply) {
        Some(t) => t,
        None => {
            let retry = request.follow_up(&reply, ctx.prompts.code_block_retry.render_with(&[])?);
            let second = chat.chat(&retry)?;
            state.history.push(HistoryEntry::call(0, fragment_id, "code_block_retry", &second));
            first_code_block(&second).ok_or_else(|| PipelineError::NoCodeBlock(fragment_id.to_string()))?
        }
    };
    state.set_translation(fragment_id, text.clone());
    Ok(text)
}

/// Error lines attributed to a fragment: errors inside its span plus errors
/// elsewhere whose enclosing view was opened by one of its lines.
pub fn fragment_error_lines(verdicts: &[LineVerdict], span: Span) -> Vec<&LineVerdict> {
    verdicts
        .iter()
        .filter(|v| v.status.is_error())
        .filter(|v| span.contains(v.line_no) || v.context_line.is_some_and(|c| span.contains(c)))
        .collect()
}

fn annotate(text: &str, first_line: usize, errors: &[&LineVerdict]) -> String {
    text.lines()
        .enumerate()
        .map(|(i, line)| match errors.iter().find(|v| v.line_no == first_line + i) {
            Some(v) if v.status == LineStatus::ViewError => format!("{line}    <-- VIEW ERROR"),
            Some(_) => format!("{line}    <-- SYNTAX ERROR"),
            None => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn template_hints(tree: &VdmTree, errors: &[&LineVerdict], retrieval: Option<&RetrievalResult>, corpus: &ManualCorpus) -> String {
    let mut lines = Vec::new();
    let mut seen = BTreeSet::new();
    for v in errors {
        if let Some(id) = v.syntax_node {
            let node = tree.node(id);
            if seen.insert(node.cli.clone()) {
                lines.push(format!("- {}    (valid in view: {})", node.cli, node.view));
            }
        }
    }
    if let Some(r) = retrieval {
        for (id, _) in &r.command_pages {
            for c in corpus.page(id).map(|p| p.commands.as_slice()).unwrap_or_default() {
                if seen.insert(c.clone()) {
                    lines.push(format!("- {c}"));
                }
            }
        }
    }
    if lines.is_empty() {
        "(none)".into()
    } else {
        lines.join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineOutcome {
    pub rounds: usize,
    pub errors_initial: usize,
    pub errors_final: usize,
}

struct Measure {
    fragment: usize,
    total: usize,
}

fn measure(state: &TranslationState, tree: &VdmTree, fragment_id: &str) -> (Measure, Vec<LineVerdict>, Span) {
    let (text, spans) = state.assemble();
    let verdicts = tree.check_config(&text);
    let span = spans.get(fragment_id).copied().unwrap_or(Span { first: 1, last: 0 });
    let m = Measure {
        fragment: fragment_error_lines(&verdicts, span).len(),
        total: verdicts.iter().filter(|v| v.status.is_error()).count(),
    };
    (m, verdicts, span)
}

/// Checker-in-the-loop refinement of one translated fragment. A correction
/// is adopted only when the fragment's error count strictly decreases and
/// the whole assembly does not get worse; otherwise the loop stops.
pub fn refine_syntax(
    chat: &dyn ChatProvider,
    ctx: &PipelineContext<'_>,
    state: &mut TranslationState,
    fragment_id: &str,
    retrieval: Option<&RetrievalResult>,
    max_rounds: usize,
) -> Result<RefineOutcome, PipelineError> {
    if !state.translated.contains_key(fragment_id) {
        return Err(PipelineError::UnknownFragment(fragment_id.to_string()));
    }
    let tree = ctx.target_tree;
    let (mut current, mut verdicts, mut span) = measure(state, tree, fragment_id);
    let mut outcome = RefineOutcome {
        rounds: 0,
        errors_initial: current.fragment,
        errors_final: current.fragment,
    };
    let mut dialogue: Option<(ChatRequest, String)> = None;
    for round in 1..=max_rounds {
        if current.fragment == 0 {
            break;
        }
        outcome.rounds = round;
        let errors = fragment_error_lines(&verdicts, span);
        let fragment_text = state.translated[fragment_id].clone();
        let previous = state.preceding_text(fragment_id);
        let prompt = ctx.prompts.syntax_refinement.render_with(&[
            ("target_vendor", ctx.target_vendor()),
            ("previous_translation", or_none(&previous)),
            ("annotated_fragment", &annotate(&fragment_text, span.first, &errors)),
            ("templates", &template_hints(tree, &errors, retrieval, ctx.target_corpus)),
        ])?;
        let request = match &dialogue {
            None => ChatRequest::new(system_prompt(ctx.prompts)?, prompt),
            Some((req, reply)) => req.follow_up(reply, prompt),
        };
        let reply = chat.chat(&request)?;
        let mut entry = HistoryEntry::call(round, fragment_id, "syntax_refinement", &reply);
        entry.errors_before = Some(current.fragment);
        let Some(candidate) = first_code_block(&reply) else {
            entry.adopted = Some(false);
            state.history.push(entry);
            break;
        };
        state.set_translation(fragment_id, candidate);
        let (next, next_verdicts, next_span) = measure(state, tree, fragment_id);
        entry.errors_after = Some(next.fragment);
        let adopt = next.fragment < current.fragment && next.total <= current.total;
        entry.adopted = Some(adopt);
        state.history.push(entry);
        if !adopt {
            state.set_translation(fragment_id, fragment_text);
            break;
        }
        current = next;
        verdicts = next_verdicts;
        span = next_span;
        dialogue = Some((request, reply));
    }
    outcome.errors_final = current.fragment;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub max_rounds: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self { max_rounds: 3 }
    }
}

/// A run that stopped early; `state` is what the checkpoint holds.
#[derive(Debug)]
pub struct PipelineFailure {
    pub state: Box<TranslationState>,
    pub error: PipelineError,
}

/// Division, then per fragment in order: retrieval, translation, syntax
/// refinement. The checkpoint (if any) is rewritten after division and after
/// every completed fragment; `resume` continues from such a checkpoint.
pub fn run_pipeline(
    providers: Providers<'_>,
    ctx: &PipelineContext<'_>,
    source_text: &str,
    retrieval_params: &RetrievalParams,
    params: &PipelineParams,
    checkpoint: Option<&Path>,
    resume: Option<TranslationState>,
) -> Result<TranslationState, PipelineFailure> {
    let fresh = TranslationState::new(source_text);
    let mut state = match resume {
        Some(s) if s.source_digest == fresh.source_digest => s,
        Some(_) => {
            log::warn!("checkpoint belongs to a different source configuration; starting over");
            fresh
        }
        None => fresh,
    };
    let fail = |state: &TranslationState, error: PipelineError| PipelineFailure {
        state: Box::new(state.clone()),
        error,
    };
    let save = |state: &TranslationState| -> Result<(), PipelineError> {
        match checkpoint {
            Some(p) => state.save(p),
            None => Ok(()),
        }
    };

    if !state.divided {
        let doc = ConfigDocument::parse(source_text, ctx.source_tree, ctx.source_corpus);
        let root_view = ctx.source_tree.profile.root_view.clone();
        let division = divide_and_extract(providers.chat, ctx.prompts, &doc, ctx.source_corpus, &root_view)
            .map_err(|e| fail(&state, e))?;
        for (prompt_id, digest) in division.calls {
            state.history.push(HistoryEntry {
                round: 0,
                fragment_id: String::new(),
                prompt_id,
                reply_digest: digest,
                errors_before: None,
                errors_after: None,
                adopted: None,
            });
        }
        if let Some(problem) = division.degraded {
            state.degraded.push(format!("division: {problem}"));
        }
        let (fragments, intents) = division.pairs.into_iter().unzip();
        state.fragments = fragments;
        state.intents = intents;
        state.divided = true;
        save(&state).map_err(|e| fail(&state, e))?;
    }

    let ids: Vec<String> = state.fragments.iter().map(|f| f.id.clone()).collect();
    for id in ids {
        if state.translated.contains_key(&id) {
            continue;
        }
        let checkpointed = state.clone();
        let step = |state: &mut TranslationState| -> Result<(), PipelineError> {
            let fragment = state.fragment(&id).expect("listed fragment").clone();
            let intents = state.intents_for(&id).expect("intents per fragment").clone();
            let retrieval = retrieval::retrieve(providers, &ctx.retrieval(), &fragment, &intents, retrieval_params)?;
            translate_fragment(providers.chat, ctx, state, &id, &retrieval)?;
            refine_syntax(providers.chat, ctx, state, &id, Some(&retrieval), params.max_rounds)?;
            state.retrievals.insert(id.clone(), retrieval);
            Ok(())
        };
        if let Err(e) = step(&mut state) {
            return Err(fail(&checkpointed, e));
        }
        save(&state).map_err(|e| fail(&state, e))?;
    }
    state.final_text = state.assemble().0;
    Ok(state)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hierarchy::VendorProfile;
    use crate::providers::MockChat;

    pub(crate) fn alpha_tree() -> VdmTree {
        let profile = VendorProfile {
            name: "alpha".into(),
            root_view: "configure".into(),
            exit_tokens: vec!["exit".into()],
            comment_prefixes: vec!["#".into()],
            convention: Default::default(),
        };
        let doc = r#"{"vendor": "alpha", "root": {"type": "view", "cli": "configure", "view": "root", "children": [
            {"type": "view", "cli": "system", "view": "configure", "children": [
                {"type": "command", "cli": "name <name>", "view": "system", "children": []}]},
            {"type": "view", "cli": "port <port-id>", "view": "configure", "children": [
                {"type": "command", "cli": "description <text>", "view": "port", "children": []},
                {"type": "command", "cli": "[no] shutdown", "view": "port", "children": []}]},
            {"type": "command", "cli": "banner <text>", "view": "configure", "children": []}
        ]}}"#;
        VdmTree::load(doc, profile).unwrap()
    }

    const CONFIG: &str = "configure\n    system\n        name \"r1\"\n    exit\n    port 1/1/1\n        description \"up\"\n        no shutdown\n    exit\n    banner hi\nexit";

    fn doc() -> ConfigDocument {
        ConfigDocument::parse(CONFIG, &alpha_tree(), &ManualCorpus::default())
    }

    #[test]
    fn code_block_extraction() {
        assert_eq!(first_code_block("x\n```\na\nb\n```\ny").as_deref(), Some("a\nb"));
        assert_eq!(first_code_block("```text\nq\n```\n```\nr\n```").as_deref(), Some("q"));
        assert_eq!(first_code_block("no block"), None);
        assert_eq!(first_code_block("```\nunterminated"), None);
    }

    #[test]
    fn fallback_blocks_follow_top_level_views() {
        let d = doc();
        assert_eq!(d.opened_views.keys().copied().collect::<Vec<_>>(), vec![2, 5]);
        let pairs = fallback_division(&d, "configure");
        let spans: Vec<_> = pairs.iter().map(|(f, _)| f.line_range).collect();
        assert_eq!(spans, vec![(1, 1), (2, 3), (5, 7), (9, 9)]);
        assert_eq!(pairs[1].1.general, "configure system");
        assert_eq!(pairs[2].0.text, "    port 1/1/1\n        description \"up\"\n        no shutdown");
        let joined: Vec<String> = pairs.iter().flat_map(|(f, _)| f.text.lines().map(str::to_string)).collect();
        let content: Vec<String> = d.content_lines().iter().map(|n| d.lines[n - 1].clone()).collect();
        assert_eq!(joined, content);
    }

    #[test]
    fn division_valid_and_degraded() {
        let d = doc();
        let prompts = PromptLibrary::builtin();
        let ok = r#"{"fragments": [
            {"id": "a", "lines": [1, 4], "general_intent": "name the device", "detailed_intents": ["set name"]},
            {"id": "b", "lines": [5, 10], "general_intent": "bring up port", "detailed_intents": []}]}"#;
        let mock = MockChat::substrings([("DIVISION AND INTENT", ok)]);
        let div = divide_and_extract(&mock, &prompts, &d, &ManualCorpus::default(), "configure").unwrap();
        assert_eq!(div.pairs.len(), 2);
        assert_eq!(div.pairs[0].0.id, "f1");
        assert_eq!(div.pairs[1].0.text, "    port 1/1/1\n        description \"up\"\n        no shutdown\n    banner hi");
        assert!(div.degraded.is_none());

        let overlap = r#"{"fragments": [{"lines": [1, 5], "general_intent": "a"}, {"lines": [5, 10], "general_intent": "b"}]}"#;
        let mock = MockChat::substrings([("DIVISION", overlap)]);
        let div = divide_and_extract(&mock, &prompts, &d, &ManualCorpus::default(), "configure").unwrap();
        assert_eq!(mock.call_count(), 2);
        assert!(div.degraded.unwrap().contains("overlaps"));
        assert_eq!(div.pairs.len(), 4);
    }

    #[test]
    fn uncovered_line_is_rejected() {
        let d = doc();
        let err = parse_division(r#"{"fragments": [{"lines": [1, 4], "general_intent": "x"}]}"#, &d).unwrap_err();
        assert!(err.contains("5, 6, 7, 9"), "{err}");
    }

    #[test]
    fn empty_config_makes_no_calls() {
        let tree = alpha_tree();
        let mock = MockChat::default();
        let prompts = PromptLibrary::builtin();
        let corpus = ManualCorpus::default();
        let ctx = PipelineContext {
            prompts: &prompts,
            source_tree: &tree,
            target_tree: &tree,
            source_corpus: &corpus,
            target_corpus: &corpus,
        };
        let embed = crate::providers::HashingEmbedder::default();
        let providers = Providers { chat: &mock, embed: &embed };
        let state = run_pipeline(providers, &ctx, "", &RetrievalParams::default(), &PipelineParams::default(), None, None).unwrap();
        assert!(state.fragments.is_empty());
        assert_eq!(state.final_text, "");
        assert_eq!(mock.call_count(), 0);
    }

    fn refine_state(text: &str) -> TranslationState {
        let mut s = TranslationState::new("src");
        s.divided = true;
        s.fragments.push(Fragment {
            id: "f1".into(),
            line_range: (1, 1),
            text: "src".into(),
            manual_page_ids: vec![],
        });
        s.set_translation("f1", text.into());
        s
    }

    fn refine_with(reply: &str, start: &str) -> (TranslationState, RefineOutcome, usize) {
        let tree = alpha_tree();
        let prompts = PromptLibrary::builtin();
        let corpus = ManualCorpus::default();
        let ctx = PipelineContext {
            prompts: &prompts,
            source_tree: &tree,
            target_tree: &tree,
            source_corpus: &corpus,
            target_corpus: &corpus,
        };
        let mock = MockChat::substrings([("SYNTAX REFINEMENT", reply)]);
        let mut s = refine_state(start);
        let out = refine_syntax(&mock, &ctx, &mut s, "f1", None, 3).unwrap();
        (s, out, mock.call_count())
    }

    const TWO_ERRORS: &str = "system\n    nme r1\n    description x\nexit";

    #[test]
    fn refine_zero_errors_is_noop() {
        let (s, out, calls) = refine_with("unused", "system\n    name r1\nexit");
        assert_eq!((out.rounds, calls), (0, 0));
        assert_eq!(s.final_text, "system\n    name r1\nexit");
    }

    #[test]
    fn refine_adopts_strict_decrease() {
        let (s, out, _) = refine_with("```\nsystem\n    name r1\nexit\n```", TWO_ERRORS);
        assert_eq!((out.errors_initial, out.errors_final, out.rounds), (2, 0, 1));
        assert_eq!(s.final_text, "system\n    name r1\nexit");
        assert_eq!(s.history.last().unwrap().adopted, Some(true));
    }

    #[test]
    fn refine_rejects_increase_and_tie() {
        let worse = "```\nsystem\n    nme r1\n    description x\n    bogus\nexit\n```";
        let (s, out, _) = refine_with(worse, TWO_ERRORS);
        assert_eq!(out.errors_final, 2);
        assert_eq!(s.final_text, TWO_ERRORS);
        assert_eq!(s.history.last().unwrap().errors_after, Some(3));
        let tie = "```\nsystem\n    nme r2\n    description y\nexit\n```";
        let (s, out, calls) = refine_with(tie, TWO_ERRORS);
        assert_eq!((out.errors_final, calls), (2, 1));
        assert_eq!(s.final_text, TWO_ERRORS);
    }

    #[test]
    fn translate_requires_code_block() {
        let tree = alpha_tree();
        let prompts = PromptLibrary::builtin();
        let corpus = ManualCorpus::default();
        let ctx = PipelineContext {
            prompts: &prompts,
            source_tree: &tree,
            target_tree: &tree,
            source_corpus: &corpus,
            target_corpus: &corpus,
        };
        let mut s = refine_state("x");
        s.translated.clear();
        let mock = MockChat::substrings([("INCREMENTAL", "Here you go:\n```\nsystem\nexit\n```\nDone.")]);
        let t = translate_fragment(&mock, &ctx, &mut s, "f1", &RetrievalResult::default()).unwrap();
        assert_eq!(t, "system\nexit");
        let mock = MockChat::substrings([("INCREMENTAL", "no"), ("RETRY: CODE BLOCK", "still no")]);
        let err = translate_fragment(&mock, &ctx, &mut s, "f1", &RetrievalResult::default()).unwrap_err();
        assert!(matches!(err, PipelineError::NoCodeBlock(_)));
    }

    #[test]
    fn attribution_to_view_opener() {
        let mut s = refine_state("system\n    name r1");
        s.fragments.push(Fragment {
            id: "f2".into(),
            line_range: (2, 2),
            text: "x".into(),
            manual_page_ids: vec![],
        });
        s.set_translation("f2", "    bogus\nexit".into());
        let tree = alpha_tree();
        let (text, spans) = s.assemble();
        let verdicts = tree.check_config(&text);
        assert_eq!(fragment_error_lines(&verdicts, spans["f1"]).len(), 1);
        assert_eq!(fragment_error_lines(&verdicts, spans["f2"]).len(), 1);
    }
}
