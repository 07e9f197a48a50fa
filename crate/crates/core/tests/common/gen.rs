//! Random command templates kept as a small syntax tree, so each one can be
//! printed as template text and compiled separately into a regex oracle.

use proptest::prelude::*;

pub const KEYWORDS: [&str; 8] = ["ip", "address", "vlan", "peer", "area", "mtu", "undo", "group"];
pub const PARAMS: [&str; 3] = ["a", "b", "c"];
/// A token outside `KEYWORDS` used for negative mutations.
pub const FOREIGN: &str = "zzz";

#[derive(Debug, Clone)]
pub enum Rep {
    Once,
    Star,
    Range(u32, u32),
}

#[derive(Debug, Clone)]
pub enum Item {
    Kw(&'static str),
    Param(&'static str),
    Req(Vec<Vec<(Item, Rep)>>),
    Opt(Vec<Vec<(Item, Rep)>>),
}

pub type Seq = Vec<(Item, Rep)>;

fn rep_text(r: &Rep) -> String {
    match r {
        Rep::Once => String::new(),
        Rep::Star => " *".into(),
        Rep::Range(m, n) => format!(" &<{m}-{n}>"),
    }
}

fn item_text(i: &Item) -> String {
    let alts = |v: &Vec<Seq>| v.iter().map(|s| seq_text(s)).collect::<Vec<_>>().join(" | ");
    match i {
        Item::Kw(k) => k.to_string(),
        Item::Param(p) => format!("<{p}>"),
        Item::Req(v) => format!("{{ {} }}", alts(v)),
        Item::Opt(v) => format!("[ {} ]", alts(v)),
    }
}

pub fn seq_text(s: &Seq) -> String {
    s.iter()
        .map(|(i, r)| format!("{}{}", item_text(i), rep_text(r)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn item_regex(i: &Item) -> String {
    let alts = |v: &Vec<Seq>| v.iter().map(|s| seq_regex(s)).collect::<Vec<_>>().join("|");
    match i {
        Item::Kw(k) => format!("{} ", regex::escape(k)),
        Item::Param(_) => r"\S+ ".into(),
        Item::Req(v) => format!("(?:{})", alts(v)),
        Item::Opt(v) => format!("(?:{})?", alts(v)),
    }
}

fn seq_regex(s: &Seq) -> String {
    s.iter()
        .map(|(i, r)| {
            let body = item_regex(i);
            match r {
                Rep::Once => body,
                Rep::Star => format!("(?:{body})+"),
                Rep::Range(m, n) => format!("(?:{body}){{{m},{n}}}"),
            }
        })
        .collect()
}

/// Anchored regex over lines rendered as `tok tok ... ` (one space after each token).
pub fn oracle(s: &Seq) -> regex::Regex {
    regex::Regex::new(&format!("^{}$", seq_regex(s))).unwrap()
}

pub fn oracle_accepts(re: &regex::Regex, tokens: &[&str]) -> bool {
    let line: String = tokens.iter().map(|t| format!("{t} ")).collect();
    re.is_match(&line)
}

fn leaves(s: &Seq) -> usize {
    s.iter()
        .map(|(i, _)| match i {
            Item::Kw(_) | Item::Param(_) => 1,
            Item::Req(v) | Item::Opt(v) => v.iter().map(leaves).sum(),
        })
        .sum()
}

pub fn has_param(s: &Seq) -> bool {
    s.iter().any(|(i, _)| match i {
        Item::Param(_) => true,
        Item::Kw(_) => false,
        Item::Req(v) | Item::Opt(v) => v.iter().any(has_param),
    })
}

fn rep() -> impl Strategy<Value = Rep> {
    prop_oneof![
        8 => Just(Rep::Once),
        1 => Just(Rep::Star),
        1 => (1u32..=2, 0u32..=2).prop_map(|(m, extra)| Rep::Range(m, m + extra)),
    ]
}

/// Templates of at most `max_depth` nesting levels and `max_tokens` leaves.
pub fn template(max_depth: u32, max_tokens: usize) -> impl Strategy<Value = Seq> {
    let leaf = prop_oneof![
        3 => proptest::sample::select(&KEYWORDS[..]).prop_map(Item::Kw),
        1 => proptest::sample::select(&PARAMS[..]).prop_map(Item::Param),
    ];
    let item = leaf.prop_recursive(max_depth.saturating_sub(1), 24, 3, |inner| {
        let alts = move || proptest::collection::vec(proptest::collection::vec((inner.clone(), rep()), 1..=3), 1..=3);
        prop_oneof![alts().prop_map(Item::Req), alts().prop_map(Item::Opt)]
    });
    proptest::collection::vec((item, rep()), 1..=4).prop_filter("token budget", move |s| leaves(s) <= max_tokens)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub samples: usize,
    pub mutants: usize,
    /// Mutants accepted because a parameter absorbed the foreign token.
    pub absorbed: usize,
    pub skipped: bool,
}

/// Round trip and negative closure for one template:
/// * every enumerated sample matches its own graph and the regex oracle;
/// * replacing any one keyword token of a sample by a foreign token is
///   rejected, unless the oracle shows a parameter can take that token
///   (never the case for parameter-free templates).
pub fn check_template(s: &Seq) -> Result<CheckStats, String> {
    use inta_core::template::{parse_template, TemplateConvention, TemplateError};
    let text = seq_text(s);
    let graph = parse_template(&text, &TemplateConvention::default()).map_err(|e| format!("{text}: {e}"))?;
    let re = oracle(s);
    let samples = match graph.enumerate_samples_capped(2, 2_000) {
        Ok(v) => v,
        Err(TemplateError::ExplosionLimit { .. }) => return Ok(CheckStats { skipped: true, ..Default::default() }),
        Err(e) => return Err(format!("{text}: {e}")),
    };
    let mut stats = CheckStats::default();
    let keywords = graph.keywords();
    for sample in &samples {
        stats.samples += 1;
        let tokens: Vec<&str> = sample.split_whitespace().collect();
        if !graph.match_tokens(&tokens).matched {
            return Err(format!("{text}: own sample {sample:?} rejected"));
        }
        if !oracle_accepts(&re, &tokens) {
            return Err(format!("{text}: oracle rejects sample {sample:?}"));
        }
        for (i, t) in tokens.iter().enumerate() {
            if !keywords.contains(*t) {
                continue;
            }
            let mut mutant = tokens.clone();
            mutant[i] = FOREIGN;
            stats.mutants += 1;
            let got = graph.match_tokens(&mutant).matched;
            let want = oracle_accepts(&re, &mutant);
            if got != want {
                return Err(format!("{text}: mutant {mutant:?} matched={got}, oracle={want}"));
            }
            if got {
                if !has_param(s) {
                    return Err(format!("{text}: parameter-free template accepted mutant {mutant:?}"));
                }
                stats.absorbed += 1;
            }
        }
    }
    Ok(stats)
}
