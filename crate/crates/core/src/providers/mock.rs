//! Scripted chat provider. Each entry matches either the canonical request
//! hash or literal substrings of the last user message; the first matching
//! entry in script order supplies the reply.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, ProviderError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockMatch {
    /// A 64-character lowercase hex string is a request hash, anything else a substring.
    One(String),
    /// Every substring must occur in the last user message.
    All(Vec<String>),
}

fn is_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl MockMatch {
    fn matches(&self, request: &ChatRequest, hash: &str) -> bool {
        let prompt = request.last_user();
        match self {
            MockMatch::One(s) if is_hash(s) => s == hash,
            MockMatch::One(s) => prompt.contains(s.as_str()),
            MockMatch::All(parts) => parts.iter().all(|p| prompt.contains(p.as_str())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(rename = "match")]
    pub matcher: MockMatch,
    pub reply: String,
}

#[derive(Debug, Default)]
pub struct MockChat {
    entries: Vec<MockEntry>,
    calls: Mutex<Vec<String>>,
}

impl MockChat {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        Self {
            entries,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    /// Builds a script of substring entries.
    pub fn substrings<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::new(
            pairs
                .into_iter()
                .map(|(m, r)| MockEntry {
                    matcher: MockMatch::One(m.to_string()),
                    reply: r.to_string(),
                })
                .collect(),
        )
    }

    /// Hashes of every request received, in call order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("mock lock").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("mock lock").len()
    }
}

impl ChatProvider for MockChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        request.validate()?;
        let hash = request.hash();
        let mut calls = self.calls.lock().expect("mock lock");
        calls.push(hash.clone());
        self.entries
            .iter()
            .find(|e| e.matcher.matches(request, &hash))
            .map(|e| e.reply.clone())
            .ok_or_else(|| ProviderError::UnscriptedRequest {
                preview: request.last_user().chars().take(80).collect(),
                hash,
            })
    }
}
