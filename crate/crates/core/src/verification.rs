//! Semantic verification and refinement of a finished translation, the final
//! line-by-line syntax check, and the translation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{error_counts, normalize_ws, LineStatus, LineVerdict, VdmTree};
use crate::pipeline::{first_code_block, PipelineContext};
use crate::providers::prompt::PromptError;
use crate::providers::{sha256_hex, ChatProvider, ChatRequest, ProviderError, Providers};
use crate::retrieval::{relevant_manuals, render_pages, RetrievalError};

pub const DEGRADED_COMMENT: &str = "unparseable analysis";
pub const RELEVANT_MANUALS_K: usize = 5;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("manual retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("syntax verdicts do not cover translated line {0}")]
    CoverageGap(usize),
}

impl VerifyError {
    pub fn is_provider_failure(&self) -> bool {
        matches!(
            self,
            VerifyError::Provider(_) | VerifyError::Retrieval(RetrievalError::Provider(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportUnit {
    #[serde(rename = "source")]
    pub source_fragment: String,
    #[serde(rename = "target")]
    pub target_fragment: String,
    pub is_consistent: bool,
    pub comment: String,
    /// Inclusive line span of the unit in the translation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lines: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub units: Vec<ReportUnit>,
    pub round: u8,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

impl SemanticReport {
    pub fn inconsistent(&self) -> impl Iterator<Item = (usize, &ReportUnit)> {
        self.units.iter().enumerate().filter(|(_, u)| !u.is_consistent)
    }
}

#[derive(Deserialize)]
struct RawUnit {
    #[serde(default)]
    source: String,
    #[serde(default)]
    target: String,
    is_consistent: bool,
    #[serde(default)]
    comment: String,
}

#[derive(Deserialize)]
struct RawReport {
    units: Vec<RawUnit>,
}

fn content(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, normalize_ws(l)))
        .filter(|(_, l)| !l.is_empty())
        .collect()
}

/// Parses a report reply and checks that the unit targets reproduce the
/// translation line by line, assigning each unit its line span.
fn parse_report(reply: &str, target: &str) -> Result<Vec<ReportUnit>, String> {
    let mut candidates = vec![reply.trim().to_string()];
    candidates.extend(first_code_block(reply));
    if let (Some(a), Some(b)) = (reply.find('{'), reply.rfind('}')) {
        if a < b {
            candidates.push(reply[a..=b].to_string());
        }
    }
    let raw = candidates
        .iter()
        .find_map(|c| serde_json::from_str::<RawReport>(c).ok())
        .ok_or_else(|| "the reply is not a JSON object with a \"units\" list".to_string())?;
    if raw.units.is_empty() {
        return Err("the report has no units".into());
    }
    let expected = content(target);
    let total_lines = target.lines().count();
    let mut pos = 0;
    let mut prev_end = 0;
    let mut units = Vec::new();
    for (i, u) in raw.units.into_iter().enumerate() {
        if !u.is_consistent && u.comment.trim().is_empty() {
            return Err(format!("unit {} is inconsistent but has no comment", i + 1));
        }
        let lines = content(&u.target);
        for (_, l) in &lines {
            match expected.get(pos) {
                Some((_, e)) if e == l => pos += 1,
                Some((n, e)) => return Err(format!("unit {} target {l:?} does not match translation line {n} {e:?}", i + 1)),
                None => return Err(format!("unit {} target {l:?} is beyond the end of the translation", i + 1)),
            }
        }
        let span = (!lines.is_empty()).then(|| {
            let span = (prev_end + 1, expected[pos - 1].0);
            prev_end = span.1;
            span
        });
        units.push(ReportUnit {
            source_fragment: u.source,
            target_fragment: u.target,
            is_consistent: u.is_consistent,
            comment: u.comment,
            lines: span,
        });
    }
    if let Some((n, l)) = expected.get(pos) {
        return Err(format!("translation line {n} {l:?} is not covered by any unit"));
    }
    if let Some(last) = units.iter_mut().rev().find_map(|u| u.lines.as_mut()) {
        last.1 = total_lines;
    }
    Ok(units)
}

fn degraded_report(source: &str, target: &str, round: u8) -> SemanticReport {
    let n = target.lines().count();
    SemanticReport {
        units: vec![ReportUnit {
            source_fragment: source.to_string(),
            target_fragment: target.to_string(),
            is_consistent: false,
            comment: DEGRADED_COMMENT.to_string(),
            lines: (n > 0).then_some((1, n)),
        }],
        round,
        degraded: true,
    }
}

/// Unit-by-unit consistency analysis of `target` against `source`. An
/// unusable reply is reprompted once, then replaced by a single degraded unit.
pub fn semantic_analyze(
    chat: &dyn ChatProvider,
    ctx: &PipelineContext<'_>,
    source: &str,
    target: &str,
    round: u8,
) -> Result<SemanticReport, VerifyError> {
    if source.trim().is_empty() || target.trim().is_empty() {
        return Err(VerifyError::InvalidInput("source and target must be non-empty".into()));
    }
    let prompts = ctx.prompts;
    let template = prompts.semantic_report.render_with(&[])?;
    let prompt = prompts.semantic_verification.render_with(&[
        ("source_vendor", ctx.source_vendor()),
        ("target_vendor", ctx.target_vendor()),
        ("report_template", &template),
        ("source", source),
        ("target", target),
    ])?;
    let request = ChatRequest::new(prompts.system.render_with(&[])?, prompt);
    let reply = chat.chat(&request)?;
    let problem = match parse_report(&reply, target) {
        Ok(units) => return Ok(SemanticReport { units, round, degraded: false }),
        Err(p) => p,
    };
    log::warn!("semantic report rejected: {problem}");
    let retry = request.follow_up(&reply, prompts.report_retry.render_with(&[("problem", &problem)])?);
    let second = chat.chat(&retry)?;
    match parse_report(&second, target) {
        Ok(units) => Ok(SemanticReport { units, round, degraded: false }),
        Err(p) => {
            log::warn!("semantic report rejected again ({p}); degrading to a single unit");
            Ok(degraded_report(source, target, round))
        }
    }
}

/// Count used by the refinement guard: lines the target checker rejects.
pub fn syntax_errors(tree: &VdmTree, text: &str) -> usize {
    error_counts(&tree.check_config(text)).total_errors()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticAttempt {
    pub unit: usize,
    pub reply_digest: String,
    pub errors_before: usize,
    pub errors_after: Option<usize>,
    pub adopted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticRefinement {
    pub target: String,
    pub r1: SemanticReport,
    pub attempts: Vec<SemanticAttempt>,
    pub errors_initial: usize,
    pub errors_final: usize,
}

/// Refines each inconsistent unit in report order, adopting a candidate only
/// when it has no more checker errors than the current translation, then
/// analyzes the result again.
pub fn semantic_refine(
    providers: Providers<'_>,
    ctx: &PipelineContext<'_>,
    source: &str,
    target: &str,
    r0: &SemanticReport,
) -> Result<SemanticRefinement, VerifyError> {
    let tree = ctx.target_tree;
    let mut current = target.to_string();
    let mut current_errors = syntax_errors(tree, &current);
    let errors_initial = current_errors;
    let mut attempts = Vec::new();
    if !r0.degraded {
        for (index, unit) in r0.inconsistent() {
            let target_query = if unit.target_fragment.trim().is_empty() {
                format!("{}\n{}", unit.source_fragment, unit.comment)
            } else {
                unit.target_fragment.clone()
            };
            let src_ids = relevant_manuals(providers.embed, ctx.source_corpus, &unit.source_fragment, RELEVANT_MANUALS_K)?;
            let tgt_ids = relevant_manuals(providers.embed, ctx.target_corpus, &target_query, RELEVANT_MANUALS_K)?;
            let prompt = ctx.prompts.semantic_refinement.render_with(&[
                ("source_vendor", ctx.source_vendor()),
                ("target_vendor", ctx.target_vendor()),
                ("source_fragment", &unit.source_fragment),
                ("target_fragment", &unit.target_fragment),
                ("comment", &unit.comment),
                ("source_manuals", &render_pages(src_ids.iter().filter_map(|id| ctx.source_corpus.page(id)))),
                ("target_manuals", &render_pages(tgt_ids.iter().filter_map(|id| ctx.target_corpus.page(id)))),
                ("source", source),
                ("target", &current),
            ])?;
            let request = ChatRequest::new(ctx.prompts.system.render_with(&[])?, prompt);
            let reply = providers.chat.chat(&request)?;
            let mut attempt = SemanticAttempt {
                unit: index,
                reply_digest: sha256_hex(reply.as_bytes()),
                errors_before: current_errors,
                errors_after: None,
                adopted: false,
            };
            if let Some(candidate) = first_code_block(&reply) {
                let errors = syntax_errors(tree, &candidate);
                attempt.errors_after = Some(errors);
                if errors <= current_errors {
                    attempt.adopted = true;
                    current = candidate;
                    current_errors = errors;
                }
            }
            attempts.push(attempt);
        }
    }
    let r1 = semantic_analyze(providers.chat, ctx, source, &current, 1)?;
    Ok(SemanticRefinement {
        target: current,
        r1,
        attempts,
        errors_initial,
        errors_final: current_errors,
    })
}

/// Line-by-line check of the final translation against the target tree.
pub fn verify_syntax(tree: &VdmTree, translation: &str) -> Vec<LineVerdict> {
    tree.check_config(translation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportStatus {
    Matched,
    Mismatch,
    Structural,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxEntry {
    pub line: usize,
    pub text: String,
    pub status: ReportStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<LineStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub view_path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub lines: usize,
    pub structural: usize,
    pub matched: usize,
    pub mismatch: usize,
    pub view_errors: usize,
    pub syntax_errors: usize,
    pub units: usize,
    pub consistent_units: usize,
    pub inconsistent_units: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// sha256 over the canonical run parameters and input digests.
    pub digest: String,
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    pub syntax: Vec<SyntaxEntry>,
    pub semantic: SemanticReport,
    pub summary: ReportSummary,
    pub degraded: Vec<String>,
    pub provenance: Provenance,
}

impl TranslationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Builds the report record. Every translated line needs exactly one
/// verdict, in order.
pub fn assemble_report(
    tree: &VdmTree,
    translation: &str,
    verdicts: &[LineVerdict],
    semantic: SemanticReport,
    metrics: BTreeMap<String, f64>,
    degraded: Vec<String>,
    provenance: Provenance,
) -> Result<TranslationReport, VerifyError> {
    let lines: Vec<&str> = translation.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        match verdicts.get(i) {
            Some(v) if v.line_no == i + 1 && v.text == *line => {}
            _ => return Err(VerifyError::CoverageGap(i + 1)),
        }
    }
    if verdicts.len() > lines.len() {
        return Err(VerifyError::InvalidInput(format!(
            "{} verdicts for {} translated lines",
            verdicts.len(),
            lines.len()
        )));
    }
    let syntax = verdicts
        .iter()
        .map(|v| {
            let node = v.matched_node.map(|id| tree.node(id));
            SyntaxEntry {
                line: v.line_no,
                text: v.text.clone(),
                status: match v.status {
                    LineStatus::Matched => ReportStatus::Matched,
                    LineStatus::Structural => ReportStatus::Structural,
                    LineStatus::ViewError | LineStatus::SyntaxError => ReportStatus::Mismatch,
                },
                error_class: v.status.is_error().then_some(v.status),
                template_id: node.map(|n| n.path_id.clone()),
                template: node.map(|n| n.cli.clone()),
                view_path: v.view_path.clone(),
            }
        })
        .collect();
    let counts = error_counts(verdicts);
    let consistent = semantic.units.iter().filter(|u| u.is_consistent).count();
    let summary = ReportSummary {
        lines: lines.len(),
        structural: counts.structural,
        matched: counts.matched,
        mismatch: counts.total_errors(),
        view_errors: counts.view_errors,
        syntax_errors: counts.syntax_errors,
        units: semantic.units.len(),
        consistent_units: consistent,
        inconsistent_units: semantic.units.len() - consistent,
        metrics,
    };
    Ok(TranslationReport {
        syntax,
        semantic,
        summary,
        degraded,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ManualCorpus;
    use crate::pipeline::tests::alpha_tree;
    use crate::providers::prompt::PromptLibrary;
    use crate::providers::{HashingEmbedder, MockChat};

    const TARGET: &str = "system\n    name r1\nexit\n\nport 1/1/1\n    shutdown\nexit";

    fn with_ctx<R>(f: impl FnOnce(&PipelineContext<'_>) -> R) -> R {
        let tree = alpha_tree();
        let prompts = PromptLibrary::builtin();
        let corpus = ManualCorpus::default();
        f(&PipelineContext {
            prompts: &prompts,
            source_tree: &tree,
            target_tree: &tree,
            source_corpus: &corpus,
            target_corpus: &corpus,
        })
    }

    fn report(units: &[(&str, bool)]) -> String {
        let units: Vec<_> = units
            .iter()
            .map(|(t, ok)| serde_json::json!({"source": "s", "target": t, "is_consistent": ok, "comment": if *ok { "" } else { "differs" }}))
            .collect();
        serde_json::json!({ "units": units }).to_string()
    }

    #[test]
    fn three_units_with_spans() {
        let reply = report(&[("system\n  name r1", true), ("exit", true), ("port 1/1/1\nshutdown\nexit", false)]);
        let units = parse_report(&reply, TARGET).unwrap();
        assert_eq!(units.len(), 3);
        let spans: Vec<_> = units.iter().map(|u| u.lines).collect();
        assert_eq!(spans, vec![Some((1, 2)), Some((3, 3)), Some((4, 7))]);
    }

    #[test]
    fn missing_line_degrades_after_retry() {
        with_ctx(|ctx| {
            let bad = report(&[("system\nname r1", true)]);
            let mock = MockChat::substrings([("SEMANTIC VERIFICATION", bad.as_str()), ("RETRY: SEMANTIC REPORT", bad.as_str())]);
            let r = semantic_analyze(&mock, ctx, "src", TARGET, 0).unwrap();
            assert!(r.degraded);
            assert_eq!(r.units.len(), 1);
            assert_eq!(r.units[0].comment, DEGRADED_COMMENT);
            assert_eq!(mock.call_count(), 2);
        });
    }

    #[test]
    fn inconsistent_unit_needs_comment() {
        let reply = r#"{"units": [{"source": "s", "target": "system", "is_consistent": false}]}"#;
        assert!(parse_report(reply, "system").unwrap_err().contains("no comment"));
    }

    #[test]
    fn guard_rejects_more_errors_accepts_tie() {
        with_ctx(|ctx| {
            let r0 = SemanticReport {
                units: vec![ReportUnit {
                    source_fragment: "s".into(),
                    target_fragment: "system".into(),
                    is_consistent: false,
                    comment: "c".into(),
                    lines: Some((1, 1)),
                }],
                round: 0,
                degraded: false,
            };
            let target = "system\n    name r1\nexit";
            let consistent = report(&[(target, true)]);
            let embed = HashingEmbedder::default();
            let worse = "```\nsystem\n    nme r1\n    bogus\nexit\n```";
            let mock = MockChat::substrings([("SEMANTIC REFINEMENT", worse), ("SEMANTIC VERIFICATION", consistent.as_str())]);
            let out = semantic_refine(Providers { chat: &mock, embed: &embed }, ctx, "src", target, &r0).unwrap();
            assert_eq!(out.target, target);
            assert_eq!(out.attempts[0].errors_after, Some(2));
            assert!(!out.attempts[0].adopted);

            let tie = "```\nsystem\n    name r2\nexit\n```";
            let consistent = report(&[("system\n    name r2\nexit", true)]);
            let mock = MockChat::substrings([("SEMANTIC REFINEMENT", tie), ("SEMANTIC VERIFICATION", consistent.as_str())]);
            let out = semantic_refine(Providers { chat: &mock, embed: &embed }, ctx, "src", target, &r0).unwrap();
            assert_eq!(out.target, "system\n    name r2\nexit");
            assert_eq!(out.r1.round, 1);
            assert!(out.r1.units.iter().all(|u| u.is_consistent));
        });
    }

    #[test]
    fn mismatch_labels_and_coverage() {
        let tree = alpha_tree();
        let text = "system\n    nmae r1\nexit";
        let verdicts = verify_syntax(&tree, text);
        let semantic = SemanticReport {
            units: vec![],
            round: 1,
            degraded: false,
        };
        let r = assemble_report(&tree, text, &verdicts, semantic.clone(), BTreeMap::new(), vec![], Provenance::default()).unwrap();
        let statuses: Vec<_> = r.syntax.iter().map(|e| e.status).collect();
        assert_eq!(statuses, vec![ReportStatus::Matched, ReportStatus::Mismatch, ReportStatus::Structural]);
        assert_eq!(r.summary.mismatch, 1);
        assert_eq!(r.syntax[0].template.as_deref(), Some("system"));
        let err = assemble_report(&tree, text, &verdicts[..2], semantic, BTreeMap::new(), vec![], Provenance::default());
        assert!(matches!(err, Err(VerifyError::CoverageGap(3))));
    }
}
