//! Vendor device model (VDM) loading and the two-round configuration check.
//!
//! Round one walks the configuration with a view stack: a line must match a
//! command available in the current view. Round two re-matches every line
//! that failed round one against all commands, ignoring views: a hit there
//! is a view error, a miss is a syntax error.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::{parse_template, CommandGraph, MatchResult, TemplateConvention, TemplateError};

#[derive(Debug, Error)]
pub enum VdmError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("template of node {node} ({cli:?}) does not compile: {source}")]
    TemplateCompile {
        node: String,
        cli: String,
        #[source]
        source: TemplateError,
    },
}

/// Vendor-specific parsing behaviour.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VendorProfile {
    pub name: String,
    pub root_view: String,
    pub exit_tokens: Vec<String>,
    #[serde(default)]
    pub comment_prefixes: Vec<String>,
    #[serde(default)]
    pub convention: TemplateConvention,
}

impl VendorProfile {
    pub fn from_json(text: &str) -> Result<Self, VdmError> {
        let profile: VendorProfile = serde_json::from_str(text).map_err(|e| VdmError::Schema(e.to_string()))?;
        if profile.exit_tokens.is_empty() {
            return Err(VdmError::Schema("exit_tokens: must not be empty".into()));
        }
        Ok(profile)
    }

    pub fn is_exit(&self, line: &str) -> bool {
        let norm = normalize_ws(line);
        self.exit_tokens.iter().any(|t| normalize_ws(t) == norm)
    }

    pub fn is_comment(&self, line: &str) -> bool {
        let t = line.trim_start();
        self.comment_prefixes.iter().any(|p| !p.is_empty() && t.starts_with(p.as_str()))
    }

    /// Blank, comment and exit lines carry no command.
    pub fn is_structural(&self, line: &str) -> bool {
        line.trim().is_empty() || self.is_comment(line) || self.is_exit(line)
    }
}

pub(crate) fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Index of a node in [`VdmTree::all_commands`] (pre-order; the root is 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub struct VdmNode {
    pub id: NodeId,
    /// Dotted child-index path from the root, e.g. `0.2.1`.
    pub path_id: String,
    pub node_type: String,
    pub cli: String,
    pub view: String,
    pub children: Vec<NodeId>,
    pub parent: Option<NodeId>,
    pub compiled: CommandGraph,
}

impl VdmNode {
    pub fn enters_view(&self) -> bool {
        !self.children.is_empty()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawNode {
    #[serde(rename = "type")]
    node_type: String,
    cli: String,
    view: String,
    #[serde(default)]
    children: Vec<RawNode>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawVdm {
    vendor: String,
    root: RawNode,
}

#[derive(Debug, Clone)]
pub struct VdmTree {
    pub vendor: String,
    pub profile: VendorProfile,
    all_commands: Vec<VdmNode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineStatus {
    Matched,
    ViewError,
    SyntaxError,
    Structural,
}

impl LineStatus {
    pub fn is_error(self) -> bool {
        matches!(self, LineStatus::ViewError | LineStatus::SyntaxError)
    }
}

impl fmt::Display for LineStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LineStatus::Matched => "matched",
            LineStatus::ViewError => "view_error",
            LineStatus::SyntaxError => "syntax_error",
            LineStatus::Structural => "structural",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineVerdict {
    pub line_no: usize,
    pub text: String,
    pub status: LineStatus,
    pub matched_node: Option<NodeId>,
    /// Node matched when views are ignored (set for matched and view-error lines).
    pub syntax_node: Option<NodeId>,
    pub view_path: Vec<String>,
    /// Line that opened the innermost active view, `None` at the root view.
    pub context_line: Option<usize>,
    pub bindings: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub view_errors: usize,
    pub syntax_errors: usize,
    pub matched: usize,
    pub structural: usize,
}

impl ErrorCounts {
    pub fn total_errors(&self) -> usize {
        self.view_errors + self.syntax_errors
    }

    pub fn non_structural(&self) -> usize {
        self.matched + self.total_errors()
    }
}

pub fn error_counts(verdicts: &[LineVerdict]) -> ErrorCounts {
    let mut c = ErrorCounts::default();
    for v in verdicts {
        match v.status {
            LineStatus::Matched => c.matched += 1,
            LineStatus::ViewError => c.view_errors += 1,
            LineStatus::SyntaxError => c.syntax_errors += 1,
            LineStatus::Structural => c.structural += 1,
        }
    }
    c
}

/// Verdicts plus the view stack left after the last line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub verdicts: Vec<LineVerdict>,
    pub final_view_path: Vec<String>,
}

impl VdmTree {
    /// Loads a VDM document (`{"vendor", "root": node}`) and compiles every
    /// command template with the profile's convention.
    pub fn load(document: &str, profile: VendorProfile) -> Result<Self, VdmError> {
        let raw: RawVdm = serde_json::from_str(document).map_err(|e| VdmError::Schema(e.to_string()))?;
        let mut tree = VdmTree {
            vendor: raw.vendor,
            profile,
            all_commands: Vec::new(),
        };
        tree.insert(raw.root, None, "0".to_string())?;
        Ok(tree)
    }

    fn insert(&mut self, raw: RawNode, parent: Option<NodeId>, path_id: String) -> Result<NodeId, VdmError> {
        let compiled = parse_template(&raw.cli, &self.profile.convention).map_err(|source| {
            VdmError::TemplateCompile {
                node: path_id.clone(),
                cli: raw.cli.clone(),
                source,
            }
        })?;
        let id = NodeId(self.all_commands.len());
        self.all_commands.push(VdmNode {
            id,
            path_id: path_id.clone(),
            node_type: raw.node_type,
            cli: raw.cli,
            view: raw.view,
            children: Vec::new(),
            parent,
            compiled,
        });
        for (i, child) in raw.children.into_iter().enumerate() {
            let cid = self.insert(child, Some(id), format!("{path_id}.{i}"))?;
            self.all_commands[id.0].children.push(cid);
        }
        Ok(id)
    }

    /// Serializes the tree back into the VDM document shape.
    pub fn to_document(&self) -> String {
        fn raw(tree: &VdmTree, id: NodeId) -> RawNode {
            let n = tree.node(id);
            RawNode {
                node_type: n.node_type.clone(),
                cli: n.cli.clone(),
                view: n.view.clone(),
                children: n.children.iter().map(|c| raw(tree, *c)).collect(),
            }
        }
        let doc = RawVdm {
            vendor: self.vendor.clone(),
            root: raw(self, self.root()),
        };
        serde_json::to_string_pretty(&doc).expect("VDM serializes")
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &VdmNode {
        &self.all_commands[id.0]
    }

    pub fn all_commands(&self) -> &[VdmNode] {
        &self.all_commands
    }

    /// Name of the view a node's children live in.
    pub fn entered_view(&self, id: NodeId) -> Option<&str> {
        if id == self.root() {
            return Some(self.profile.root_view.as_str());
        }
        self.node(id).children.first().map(|c| self.node(*c).view.as_str())
    }

    /// First node, in pre-order, whose template accepts `line`, views ignored.
    pub fn match_anywhere(&self, line: &str) -> Option<(NodeId, MatchResult)> {
        self.all_commands.iter().find_map(|n| {
            let r = n.compiled.match_line(line);
            r.matched.then_some((n.id, r))
        })
    }

    fn match_in_view(&self, context: NodeId, line: &str) -> Option<(NodeId, MatchResult)> {
        let node = self.node(context);
        let children = node.children.iter().copied();
        // the root command itself is accepted at the root view without nesting
        let own = (context == self.root()).then_some(context);
        children.chain(own).find_map(|id| {
            let r = self.node(id).compiled.match_line(line);
            r.matched.then_some((id, r))
        })
    }

    pub fn check_config(&self, config: &str) -> Vec<LineVerdict> {
        self.check_config_detailed(config).verdicts
    }

    pub fn check_config_detailed(&self, config: &str) -> CheckOutcome {
        let root = self.root();
        let mut stack: Vec<(NodeId, Option<usize>)> = vec![(root, None)];
        let view_path = |stack: &[(NodeId, Option<usize>)]| -> Vec<String> {
            stack
                .iter()
                .map(|(id, _)| self.entered_view(*id).unwrap_or_default().to_string())
                .collect()
        };
        let mut verdicts = Vec::new();
        for (idx, line) in config.lines().enumerate() {
            let line_no = idx + 1;
            let mut verdict = LineVerdict {
                line_no,
                text: line.to_string(),
                status: LineStatus::SyntaxError,
                matched_node: None,
                syntax_node: None,
                view_path: view_path(&stack),
                context_line: stack.last().and_then(|(_, l)| *l),
                bindings: BTreeMap::new(),
            };
            if self.profile.is_structural(line) {
                verdict.status = LineStatus::Structural;
                if self.profile.is_exit(line) && stack.len() > 1 {
                    stack.pop();
                }
            } else if let Some((id, r)) = self.match_in_view(stack.last().expect("stack never empty").0, line) {
                verdict.status = LineStatus::Matched;
                verdict.matched_node = Some(id);
                verdict.syntax_node = Some(id);
                verdict.bindings = r.bindings;
                if id != root && self.node(id).enters_view() {
                    stack.push((id, Some(line_no)));
                }
            }
            verdicts.push(verdict);
        }
        for v in verdicts.iter_mut().filter(|v| v.status == LineStatus::SyntaxError) {
            if let Some((id, _)) = self.match_anywhere(&v.text) {
                v.status = LineStatus::ViewError;
                v.syntax_node = Some(id);
            }
        }
        CheckOutcome {
            verdicts,
            final_view_path: view_path(&stack),
        }
    }
}
