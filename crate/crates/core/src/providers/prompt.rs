//! Prompt templates with `{slot}` placeholders.
//!
//! A placeholder is `{` + identifier + `}`; any other brace (JSON examples,
//! `{ a | b }` templates) is literal text. Substitution is a single left to
//! right pass over the template body, so slot values are never expanded.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("missing slot {0:?}")]
    MissingSlot(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub required_slots: BTreeSet<String>,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let ident_len = after
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
            .count();
        let ident = &after[..ident_len];
        let valid = !ident.is_empty()
            && !ident.starts_with(|c: char| c.is_ascii_digit())
            && after[ident_len..].starts_with('}');
        if valid {
            out.push(Piece::Text(&rest[..open]));
            out.push(Piece::Slot(ident));
            rest = &after[ident_len + 1..];
        } else {
            out.push(Piece::Text(&rest[..=open]));
            rest = after;
        }
    }
    out.push(Piece::Text(rest));
    out
}

impl PromptTemplate {
    /// Every placeholder in `body` becomes a required slot.
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_slots = pieces(&body)
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.to_string()),
                Piece::Text(_) => None,
            })
            .collect();
        Self {
            id: id.into(),
            body,
            required_slots,
        }
    }

    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, PromptError> {
        if let Some(missing) = self.required_slots.iter().find(|s| !slots.contains_key(*s)) {
            return Err(PromptError::MissingSlot(missing.clone()));
        }
        let mut out = String::with_capacity(self.body.len());
        for p in pieces(&self.body) {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => match slots.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                },
            }
        }
        Ok(out)
    }

    pub fn render_with(&self, slots: &[(&str, &str)]) -> Result<String, PromptError> {
        let map = slots.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        self.render(&map)
    }
}

macro_rules! builtin {
    ($($field:ident),* $(,)?) => {
        /// The full set of prompts a run uses.
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct PromptLibrary {
            $(pub $field: PromptTemplate,)*
        }

        impl PromptLibrary {
            pub fn builtin() -> Self {
                Self {
                    $($field: PromptTemplate::new(
                        stringify!($field),
                        include_str!(concat!("../../prompts/", stringify!($field), ".txt")),
                    ),)*
                }
            }

            /// Replaces built-in templates with `<id>.txt` files found in `dir`.
            pub fn with_overrides(mut self, dir: &Path) -> Result<Self, PromptError> {
                $(
                    let path = dir.join(concat!(stringify!($field), ".txt"));
                    if path.exists() {
                        let body = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                            path: path.display().to_string(),
                            message: e.to_string(),
                        })?;
                        self.$field = PromptTemplate::new(stringify!($field), body);
                    }
                )*
                Ok(self)
            }

            pub fn ids() -> &'static [&'static str] {
                &[$(stringify!($field)),*]
            }
        }
    };
}

builtin!(
    system,
    intent_extraction,
    intent_examples,
    llm_filter,
    translation,
    syntax_refinement,
    semantic_verification,
    semantic_report,
    semantic_refinement,
    division_retry,
    filter_retry,
    code_block_retry,
    report_retry,
);

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}
