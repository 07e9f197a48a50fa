//! Command-template grammar: compiles manual syntax lines such as
//! `ip address <ip-address> { <mask> | <mask-length> } [ <sub> ]` into a
//! [`CommandGraph`] and matches concrete CLI lines against it.
//!
//! Meta-syntax (spellings configurable through [`TemplateConvention`]):
//!
//! * `<x>` parameter, binds any single whitespace-delimited token
//! * `{a | b}` required choice, exactly one alternative
//! * `[a | b]` optional choice, zero or one alternative
//! * `*` after an item makes it repeatable (one or more times)
//! * `&<m-n>` after an item makes it repeatable `m..=n` times

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of samples [`CommandGraph::enumerate_samples`] may produce.
pub const DEFAULT_SAMPLE_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("empty template")]
    EmptyTemplate,
    #[error("unbalanced delimiters at byte {offset}")]
    UnbalancedDelimiters { offset: usize },
    #[error("empty alternative at byte {offset}")]
    EmptyAlternative { offset: usize },
    #[error("unknown meta token at byte {offset}")]
    UnknownMetaToken { offset: usize },
    #[error("sample enumeration exceeds cap of {cap}")]
    ExplosionLimit { cap: usize },
}

/// Spellings of the template meta tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConvention {
    pub param_open: String,
    pub param_close: String,
    pub required_open: String,
    pub required_close: String,
    pub optional_open: String,
    pub optional_close: String,
    pub alternative: String,
    pub repeat: String,
    pub repeat_group: String,
}

impl Default for TemplateConvention {
    fn default() -> Self {
        Self {
            param_open: "<".into(),
            param_close: ">".into(),
            required_open: "{".into(),
            required_close: "}".into(),
            optional_open: "[".into(),
            optional_close: "]".into(),
            alternative: "|".into(),
            repeat: "*".into(),
            repeat_group: "&".into(),
        }
    }
}

impl TemplateConvention {
    /// Short prose description of the convention, used in translation prompts.
    pub fn describe(&self) -> String {
        format!(
            "{po}x{pc} is a parameter to be replaced by a value; \
             {ro} a {al} b {rc} means exactly one alternative is required; \
             {oo} a {al} b {oc} means at most one alternative may be given; \
             a trailing {rp} means the preceding item may repeat; \
             {rg}{po}m-n{pc} means the preceding item repeats m to n times; \
             all other words are keywords and must be typed exactly.",
            po = self.param_open,
            pc = self.param_close,
            ro = self.required_open,
            rc = self.required_close,
            oo = self.optional_open,
            oc = self.optional_close,
            al = self.alternative,
            rp = self.repeat,
            rg = self.repeat_group,
        )
    }

    fn metas(&self) -> [&str; 9] {
        [
            &self.repeat_group,
            &self.param_open,
            &self.param_close,
            &self.required_open,
            &self.required_close,
            &self.optional_open,
            &self.optional_close,
            &self.alternative,
            &self.repeat,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Seq,
    ReqSelector,
    OptSelector,
    Keyword,
    Parameter,
    End,
    Pass,
}

impl NodeKind {
    pub fn is_leaf(self) -> bool {
        !matches!(self, NodeKind::Seq | NodeKind::ReqSelector | NodeKind::OptSelector)
    }
}

fn is_one(n: &u32) -> bool {
    *n == 1
}

fn one() -> u32 {
    1
}

/// One node of a compiled command graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateNode {
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TemplateNode>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub token: String,
    #[serde(default)]
    pub repeatable: bool,
    /// Lower repetition bound; only meaningful when `repeatable`.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub repeat_min: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_max: Option<u32>,
}

impl TemplateNode {
    fn leaf(kind: NodeKind, token: impl Into<String>) -> Self {
        Self {
            kind,
            children: Vec::new(),
            token: token.into(),
            repeatable: false,
            repeat_min: 1,
            repeat_max: None,
        }
    }

    fn branch(kind: NodeKind, children: Vec<TemplateNode>) -> Self {
        Self {
            kind,
            children,
            token: String::new(),
            repeatable: false,
            repeat_min: 1,
            repeat_max: None,
        }
    }

    pub fn keyword(token: impl Into<String>) -> Self {
        Self::leaf(NodeKind::Keyword, token)
    }

    pub fn parameter(name: impl Into<String>) -> Self {
        Self::leaf(NodeKind::Parameter, name)
    }

    /// Checks the structural invariants of this subtree.
    pub fn is_well_formed(&self) -> bool {
        let shape_ok = match self.kind {
            NodeKind::Keyword | NodeKind::Parameter => {
                self.children.is_empty() && !self.token.is_empty()
            }
            NodeKind::End | NodeKind::Pass => self.children.is_empty(),
            NodeKind::Seq | NodeKind::ReqSelector => {
                !self.children.is_empty() && self.children.iter().all(|c| c.kind != NodeKind::Pass)
            }
            NodeKind::OptSelector => !self.children.is_empty(),
        };
        let repeat_ok = if self.repeatable {
            self.repeat_min >= 1 && self.repeat_max.map_or(true, |m| m >= self.repeat_min)
        } else {
            self.repeat_max.is_none()
        };
        shape_ok && repeat_ok && self.children.iter().all(TemplateNode::is_well_formed)
    }

    fn collect_tokens(&self, kind: NodeKind, out: &mut BTreeSet<String>) {
        if self.kind == kind {
            out.insert(self.token.clone());
        }
        for c in &self.children {
            c.collect_tokens(kind, out);
        }
    }
}

/// Compiled grammar of one CLI command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandGraph {
    pub root: TemplateNode,
    pub template_text: String,
    pub command_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matched: bool,
    pub bindings: BTreeMap<String, Vec<String>>,
    pub consumed: usize,
}

// ---------------------------------------------------------------------------
// Lexing

#[derive(Debug, Clone, PartialEq, Eq)]
enum Lexeme {
    Keyword(String),
    Param(String),
    ReqOpen,
    ReqClose,
    OptOpen,
    OptClose,
    Alt,
    Star,
    RepeatGroup { min: u32, max: u32 },
}

fn lex(template: &str, conv: &TemplateConvention) -> Result<Vec<(usize, Lexeme)>, TemplateError> {
    let mut out = Vec::new();
    let mut i = 0;
    let bytes_len = template.len();
    while i < bytes_len {
        let rest = &template[i..];
        let ch = rest.chars().next().expect("non-empty rest");
        if ch.is_whitespace() {
            i += ch.len_utf8();
            continue;
        }
        if rest.starts_with(conv.repeat_group.as_str()) {
            let after = &rest[conv.repeat_group.len()..];
            let body = after
                .strip_prefix(conv.param_open.as_str())
                .and_then(|b| b.find(conv.param_close.as_str()).map(|end| &b[..end]))
                .ok_or(TemplateError::UnknownMetaToken { offset: i })?;
            let (lo, hi) = body
                .split_once('-')
                .ok_or(TemplateError::UnknownMetaToken { offset: i })?;
            let min: u32 = lo.trim().parse().map_err(|_| TemplateError::UnknownMetaToken { offset: i })?;
            let max: u32 = hi.trim().parse().map_err(|_| TemplateError::UnknownMetaToken { offset: i })?;
            if min == 0 || max < min {
                return Err(TemplateError::UnknownMetaToken { offset: i });
            }
            out.push((i, Lexeme::RepeatGroup { min, max }));
            i += conv.repeat_group.len() + conv.param_open.len() + body.len() + conv.param_close.len();
            continue;
        }
        if let Some(after) = rest.strip_prefix(conv.param_open.as_str()) {
            let end = after
                .find(conv.param_close.as_str())
                .ok_or(TemplateError::UnbalancedDelimiters { offset: i })?;
            let name = after[..end].split_whitespace().collect::<Vec<_>>().join(" ");
            if name.is_empty() {
                return Err(TemplateError::UnknownMetaToken { offset: i });
            }
            out.push((i, Lexeme::Param(name)));
            i += conv.param_open.len() + end + conv.param_close.len();
            continue;
        }
        let simple = [
            (&conv.param_close, None),
            (&conv.required_open, Some(Lexeme::ReqOpen)),
            (&conv.required_close, Some(Lexeme::ReqClose)),
            (&conv.optional_open, Some(Lexeme::OptOpen)),
            (&conv.optional_close, Some(Lexeme::OptClose)),
            (&conv.alternative, Some(Lexeme::Alt)),
            (&conv.repeat, Some(Lexeme::Star)),
        ];
        if let Some((meta, lexeme)) = simple.iter().find(|(m, _)| rest.starts_with(m.as_str())) {
            match lexeme {
                Some(l) => out.push((i, l.clone())),
                // stray parameter close
                None => return Err(TemplateError::UnknownMetaToken { offset: i }),
            }
            i += meta.len();
            continue;
        }
        // keyword: run up to whitespace or the start of any meta token
        let metas = conv.metas();
        let mut end = 0;
        for (off, c) in rest.char_indices() {
            if c.is_whitespace() || metas.iter().any(|m| rest[off..].starts_with(m)) {
                break;
            }
            end = off + c.len_utf8();
        }
        out.push((i, Lexeme::Keyword(rest[..end].to_string())));
        i += end;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parsing

struct Parser {
    lexemes: Vec<(usize, Lexeme)>,
    pos: usize,
    text_len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(usize, Lexeme)> {
        self.lexemes.get(self.pos)
    }

    fn offset(&self) -> usize {
        self.peek().map_or(self.text_len, |(o, _)| *o)
    }

    fn seq(&mut self) -> Result<Vec<TemplateNode>, TemplateError> {
        let mut items = Vec::new();
        while let Some((_, lx)) = self.peek() {
            if matches!(lx, Lexeme::Alt | Lexeme::ReqClose | Lexeme::OptClose) {
                break;
            }
            items.push(self.item()?);
        }
        Ok(items)
    }

    fn item(&mut self) -> Result<TemplateNode, TemplateError> {
        let (offset, lx) = self.lexemes[self.pos].clone();
        self.pos += 1;
        let mut node = match lx {
            Lexeme::Keyword(k) => TemplateNode::keyword(k),
            Lexeme::Param(p) => TemplateNode::parameter(p),
            Lexeme::ReqOpen => {
                TemplateNode::branch(NodeKind::ReqSelector, self.alternatives(offset, false)?)
            }
            Lexeme::OptOpen => {
                let mut alts = self.alternatives(offset, true)?;
                alts.push(TemplateNode::leaf(NodeKind::Pass, ""));
                TemplateNode::branch(NodeKind::OptSelector, alts)
            }
            Lexeme::Star | Lexeme::RepeatGroup { .. } => {
                return Err(TemplateError::UnknownMetaToken { offset })
            }
            Lexeme::Alt | Lexeme::ReqClose | Lexeme::OptClose => {
                unreachable!("seq() stops before separators")
            }
        };
        while let Some((off, lx)) = self.peek().cloned() {
            let (min, max) = match lx {
                Lexeme::Star => (1, None),
                Lexeme::RepeatGroup { min, max } => (min, Some(max)),
                _ => break,
            };
            if node.repeatable {
                return Err(TemplateError::UnknownMetaToken { offset: off });
            }
            node.repeatable = true;
            node.repeat_min = min;
            node.repeat_max = max;
            self.pos += 1;
        }
        Ok(node)
    }

    fn alternatives(&mut self, open_offset: usize, optional: bool) -> Result<Vec<TemplateNode>, TemplateError> {
        let mut alts = Vec::new();
        loop {
            let mut items = self.seq()?;
            let here = self.offset();
            if self.peek().is_none() {
                return Err(TemplateError::UnbalancedDelimiters { offset: open_offset });
            }
            if items.is_empty() {
                return Err(TemplateError::EmptyAlternative { offset: here });
            }
            alts.push(if items.len() == 1 {
                items.pop().expect("one item")
            } else {
                TemplateNode::branch(NodeKind::Seq, items)
            });
            match self.peek().map(|(_, l)| l) {
                Some(Lexeme::Alt) => self.pos += 1,
                Some(Lexeme::ReqClose) if !optional => {
                    self.pos += 1;
                    return Ok(alts);
                }
                Some(Lexeme::OptClose) if optional => {
                    self.pos += 1;
                    return Ok(alts);
                }
                Some(_) => return Err(TemplateError::UnbalancedDelimiters { offset: here }),
                None => return Err(TemplateError::UnbalancedDelimiters { offset: open_offset }),
            }
        }
    }
}

/// Compiles `template` into a command graph.
pub fn parse_template(template: &str, convention: &TemplateConvention) -> Result<CommandGraph, TemplateError> {
    let lexemes = lex(template, convention)?;
    if lexemes.is_empty() {
        return Err(TemplateError::EmptyTemplate);
    }
    let mut parser = Parser {
        lexemes,
        pos: 0,
        text_len: template.len(),
    };
    let mut items = parser.seq()?;
    if let Some((offset, lx)) = parser.peek() {
        return Err(match lx {
            Lexeme::Alt => TemplateError::UnknownMetaToken { offset: *offset },
            _ => TemplateError::UnbalancedDelimiters { offset: *offset },
        });
    }
    items.push(TemplateNode::leaf(NodeKind::End, ""));
    let root = TemplateNode::branch(NodeKind::Seq, items);
    let mut graph = CommandGraph {
        root,
        template_text: template.to_string(),
        command_id: String::new(),
    };
    graph.command_id = graph.render(convention);
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Matching

type Cont<'c, 't> = &'c mut dyn FnMut(&mut Matcher<'t>, usize) -> bool;

struct Matcher<'t> {
    tokens: &'t [&'t str],
    trail: Vec<(&'t str, usize)>,
}

impl<'t> Matcher<'t> {
    fn node(&mut self, node: &'t TemplateNode, pos: usize, k: Cont<'_, 't>) -> bool {
        if node.repeatable {
            self.repeat(node, pos, 0, k)
        } else {
            self.once(node, pos, k)
        }
    }

    // Greedy: more repetitions are tried before fewer.
    fn repeat(&mut self, node: &'t TemplateNode, pos: usize, count: usize, k: Cont<'_, 't>) -> bool {
        let min = node.repeat_min as usize;
        let max = node.repeat_max.map_or(usize::MAX, |m| m as usize);
        if count < max {
            let hit = self.once(node, pos, &mut |m: &mut Matcher<'t>, p| {
                // a zero-width iteration beyond the minimum adds nothing
                if p == pos && count + 1 > min {
                    return false;
                }
                m.repeat(node, p, count + 1, &mut *k)
            });
            if hit {
                return true;
            }
        }
        count >= min && k(self, pos)
    }

    fn once(&mut self, node: &'t TemplateNode, pos: usize, k: Cont<'_, 't>) -> bool {
        match node.kind {
            NodeKind::Keyword => pos < self.tokens.len() && self.tokens[pos] == node.token && k(self, pos + 1),
            NodeKind::Parameter => {
                if pos >= self.tokens.len() {
                    return false;
                }
                self.trail.push((node.token.as_str(), pos));
                if k(self, pos + 1) {
                    return true;
                }
                self.trail.pop();
                false
            }
            NodeKind::End => pos == self.tokens.len() && k(self, pos),
            NodeKind::Pass => k(self, pos),
            NodeKind::Seq => self.seq(&node.children, 0, pos, k),
            NodeKind::ReqSelector | NodeKind::OptSelector => {
                node.children.iter().any(|child| self.node(child, pos, &mut *k))
            }
        }
    }

    fn seq(&mut self, children: &'t [TemplateNode], i: usize, pos: usize, k: Cont<'_, 't>) -> bool {
        match children.get(i) {
            None => k(self, pos),
            Some(child) => self.node(child, pos, &mut |m: &mut Matcher<'t>, p| m.seq(children, i + 1, p, &mut *k)),
        }
    }
}

impl CommandGraph {
    /// Matches a whitespace-tokenized line. Among several accepting paths the
    /// first in left-to-right child order wins.
    pub fn match_line(&self, line: &str) -> MatchResult {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        self.match_tokens(&tokens)
    }

    pub fn match_tokens(&self, tokens: &[&str]) -> MatchResult {
        let mut m = Matcher {
            tokens,
            trail: Vec::new(),
        };
        let n = tokens.len();
        let matched = m.node(&self.root, 0, &mut |_, p| p == n);
        if !matched {
            return MatchResult::default();
        }
        let mut bindings: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (name, idx) in m.trail {
            bindings.entry(name.to_string()).or_default().push(tokens[idx].to_string());
        }
        MatchResult {
            matched: true,
            bindings,
            consumed: n,
        }
    }

    pub fn keywords(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.root.collect_tokens(NodeKind::Keyword, &mut out);
        out
    }

    pub fn parameters(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.root.collect_tokens(NodeKind::Parameter, &mut out);
        out
    }

    /// Renders the graph back into canonical template text.
    pub fn render(&self, conv: &TemplateConvention) -> String {
        let mut parts = Vec::new();
        render_into(&self.root, conv, &mut parts);
        parts.join(" ")
    }

    /// Every distinct accepting token sequence, parameters rendered as
    /// `<name>` placeholders. Repeatable nodes expand at most
    /// `min(repeat_max, max_repeat)` times (never fewer than their minimum).
    pub fn enumerate_samples(&self, max_repeat: u32) -> Result<Vec<String>, TemplateError> {
        self.enumerate_samples_capped(max_repeat, DEFAULT_SAMPLE_CAP)
    }

    pub fn enumerate_samples_capped(&self, max_repeat: u32, cap: usize) -> Result<Vec<String>, TemplateError> {
        let seqs = expand(&self.root, max_repeat.max(1) as usize, cap)?;
        Ok(seqs.into_iter().map(|s| s.join(" ")).collect())
    }
}

fn render_into(node: &TemplateNode, conv: &TemplateConvention, out: &mut Vec<String>) {
    match node.kind {
        NodeKind::Keyword => out.push(node.token.clone()),
        NodeKind::Parameter => out.push(format!("{}{}{}", conv.param_open, node.token, conv.param_close)),
        NodeKind::End | NodeKind::Pass => {}
        NodeKind::Seq => {
            for c in &node.children {
                render_into(c, conv, out);
            }
        }
        NodeKind::ReqSelector | NodeKind::OptSelector => {
            let (open, close) = if node.kind == NodeKind::ReqSelector {
                (&conv.required_open, &conv.required_close)
            } else {
                (&conv.optional_open, &conv.optional_close)
            };
            out.push(open.clone());
            let mut first = true;
            for c in node.children.iter().filter(|c| c.kind != NodeKind::Pass) {
                if !first {
                    out.push(conv.alternative.clone());
                }
                first = false;
                render_into(c, conv, out);
            }
            out.push(close.clone());
        }
    }
    if node.repeatable {
        match node.repeat_max {
            None => out.push(conv.repeat.clone()),
            Some(max) => out.push(format!(
                "{}{}{}-{}{}",
                conv.repeat_group, conv.param_open, node.repeat_min, max, conv.param_close
            )),
        }
    }
}

fn dedup(seqs: Vec<Vec<String>>) -> Vec<Vec<String>> {
    let mut seen = HashSet::new();
    seqs.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

fn product(left: &[Vec<String>], right: &[Vec<String>], cap: usize) -> Result<Vec<Vec<String>>, TemplateError> {
    if left.len().saturating_mul(right.len()) > cap.saturating_mul(4) {
        return Err(TemplateError::ExplosionLimit { cap });
    }
    let mut out = Vec::with_capacity(left.len() * right.len());
    for l in left {
        for r in right {
            let mut s = l.clone();
            s.extend(r.iter().cloned());
            out.push(s);
        }
    }
    let out = dedup(out);
    if out.len() > cap {
        return Err(TemplateError::ExplosionLimit { cap });
    }
    Ok(out)
}

fn expand(node: &TemplateNode, max_repeat: usize, cap: usize) -> Result<Vec<Vec<String>>, TemplateError> {
    let once = expand_once(node, max_repeat, cap)?;
    if !node.repeatable {
        return Ok(once);
    }
    let min = node.repeat_min as usize;
    let upper = node.repeat_max.map_or(max_repeat, |m| (m as usize).min(max_repeat)).max(min);
    let mut acc: Vec<Vec<String>> = vec![Vec::new()];
    let mut out = Vec::new();
    for count in 1..=upper {
        acc = product(&acc, &once, cap)?;
        if count >= min {
            out.extend(acc.iter().cloned());
        }
        if out.len() > cap {
            return Err(TemplateError::ExplosionLimit { cap });
        }
    }
    Ok(dedup(out))
}

fn expand_once(node: &TemplateNode, max_repeat: usize, cap: usize) -> Result<Vec<Vec<String>>, TemplateError> {
    Ok(match node.kind {
        NodeKind::Keyword => vec![vec![node.token.clone()]],
        NodeKind::Parameter => vec![vec![format!("<{}>", node.token)]],
        NodeKind::End | NodeKind::Pass => vec![Vec::new()],
        NodeKind::Seq => {
            let mut acc: Vec<Vec<String>> = vec![Vec::new()];
            for c in &node.children {
                acc = product(&acc, &expand(c, max_repeat, cap)?, cap)?;
            }
            acc
        }
        NodeKind::ReqSelector | NodeKind::OptSelector => {
            let mut out = Vec::new();
            for c in &node.children {
                out.extend(expand(c, max_repeat, cap)?);
                if out.len() > cap {
                    return Err(TemplateError::ExplosionLimit { cap });
                }
            }
            dedup(out)
        }
    })
}
