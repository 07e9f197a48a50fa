//! Scripted refinement scenarios whose corrections worsen, tie or improve
//! checker error counts, plus independent simulations of the adoption rules.

use std::collections::VecDeque;
use std::sync::Mutex;

use inta_core::corpus::ManualCorpus;
use inta_core::hierarchy::{error_counts, VdmTree};
use inta_core::pipeline::{refine_syntax, Fragment, IntentSet, PipelineContext, TranslationState};
use inta_core::providers::prompt::PromptLibrary;
use inta_core::providers::{ChatProvider, ChatRequest, HashingEmbedder, ProviderError, Providers};
use inta_core::verification::{semantic_refine, ReportUnit, SemanticReport};

const NO_BLOCK: &str = "I could not produce a correction.";

/// Replies that carry a code block only when this is not `NO_BLOCK`.
fn reply(body: &str) -> String {
    if body == NO_BLOCK {
        body.to_string()
    } else {
        format!("Corrected:\n```\n{body}\n```")
    }
}

/// Pops one scripted reply per refinement prompt; every other prompt gets a
/// reply without a usable report.
pub struct Scripted {
    replies: Mutex<VecDeque<String>>,
}

impl Scripted {
    pub fn new(replies: impl IntoIterator<Item = String>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
        }
    }
}

impl ChatProvider for Scripted {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let last = request.last_user();
        if last.contains("TASK: SYNTAX REFINEMENT") || last.contains("TASK: SEMANTIC REFINEMENT") {
            Ok(self.replies.lock().unwrap().pop_front().unwrap_or_else(|| NO_BLOCK.to_string()))
        } else {
            Ok("no report".to_string())
        }
    }
}

pub struct Base {
    pub name: &'static str,
    pub fragments: [&'static str; 3],
    pub pool: Vec<&'static str>,
}

/// Interface fragment with three bad lines; corrections range from clean to worse.
fn base_a() -> Base {
    Base {
        name: "misspellings",
        fragments: [
            "system-view\nsysname r1",
            "interface GigabitEthernet 0/0/1\n descr up\n mtu-size 9000\n undo shutdwn\nquit",
            "bgp 65001\n peer 10.0.0.2 as-number 65002\nquit",
        ],
        pool: vec![
            "interface GigabitEthernet 0/0/1\n description up\n mtu 9000\n undo shutdown\nquit",
            "interface GigabitEthernet 0/0/1\n description up\n mtu-size 9000\n undo shutdown\nquit",
            "interface GigabitEthernet 0/0/1\n descr up\n mtu-size 9000\n undo shutdown\nquit",
            "interface GigabitEthernet 0/0/1\n descr up\n mtu-size 9000\n undo shutdwn\nquit",
            "interface GigabitEthernet 0/0/1\n descr up\n mtu-size 9000\n undo shutdwn\n speed 1000\nquit",
            "interface GigabitEthernet 0/0/1\n description up\nquit\n mtu 9000\n undo shutdown",
            "interface GigabitEthernet 0/0/1\n description up\n mtu 9000\n undo shutdown\nbgp 1",
            NO_BLOCK,
        ],
    }
}

/// The third fragment relies on the interface view the second leaves open, so
/// closing that view early fixes the second fragment while breaking the third.
fn base_b() -> Base {
    Base {
        name: "open-view",
        fragments: [
            "system-view\nsysname r1",
            "interface GigabitEthernet 0/0/1\n descr up\n mtu-size 9000",
            " undo shutdown\n mtu 1500\n description x\nquit",
        ],
        pool: vec![
            "interface GigabitEthernet 0/0/1\n description up\n mtu-size 9000\nquit",
            "interface GigabitEthernet 0/0/1\n description up\n mtu 9000\nquit",
            "interface GigabitEthernet 0/0/1\n description up\n mtu-size 9000",
            "interface GigabitEthernet 0/0/1\n description up\n mtu 9000",
            "interface GigabitEthernet 0/0/1\n descr up\n mtu-size 9000",
            "interface GigabitEthernet 0/0/1\n descr up\n mtu-size 9000\n speed 1",
            NO_BLOCK,
        ],
    }
}

pub struct Scenario {
    pub name: String,
    pub base: Base,
    pub replies: Vec<&'static str>,
}

/// Twenty scenarios: ten reply sequences over each base.
pub fn scenarios() -> Vec<Scenario> {
    let picks_a: [[usize; 3]; 10] = [
        [0, 0, 0],
        [4, 0, 0],
        [3, 0, 0],
        [2, 1, 0],
        [2, 4, 0],
        [1, 2, 0],
        [5, 0, 1],
        [6, 1, 0],
        [7, 0, 0],
        [2, 7, 0],
    ];
    let picks_b: [[usize; 3]; 10] = [
        [0, 1, 3],
        [1, 3, 2],
        [2, 3, 6],
        [3, 0, 1],
        [4, 3, 3],
        [5, 3, 3],
        [2, 0, 3],
        [6, 3, 3],
        [0, 0, 0],
        [1, 1, 1],
    ];
    let mut out = Vec::new();
    for (picks, make) in [(&picks_a, base_a as fn() -> Base), (&picks_b, base_b as fn() -> Base)] {
        for (i, p) in picks.iter().enumerate() {
            let base = make();
            let replies = p.iter().map(|k| base.pool[*k]).collect();
            out.push(Scenario {
                name: format!("{}-{i}", base.name),
                base,
                replies,
            });
        }
    }
    out
}

pub struct Env {
    pub prompts: PromptLibrary,
    pub source_tree: VdmTree,
    pub target_tree: VdmTree,
    pub source_corpus: ManualCorpus,
    pub target_corpus: ManualCorpus,
}

impl Env {
    pub fn load() -> Self {
        Self {
            prompts: PromptLibrary::builtin(),
            source_tree: super::tree("alpha"),
            target_tree: super::tree("beta"),
            source_corpus: super::corpus("alpha"),
            target_corpus: super::corpus("beta"),
        }
    }

    pub fn ctx(&self) -> PipelineContext<'_> {
        PipelineContext {
            prompts: &self.prompts,
            source_tree: &self.source_tree,
            target_tree: &self.target_tree,
            source_corpus: &self.source_corpus,
            target_corpus: &self.target_corpus,
        }
    }
}

fn state(frags: &[&str]) -> TranslationState {
    let mut s = TranslationState::new("source");
    s.divided = true;
    for (i, t) in frags.iter().enumerate() {
        let id = format!("f{}", i + 1);
        s.fragments.push(Fragment {
            id: id.clone(),
            line_range: (i + 1, i + 1),
            text: format!("source line {}", i + 1),
            manual_page_ids: Vec::new(),
        });
        s.intents.push(IntentSet {
            fragment_id: id.clone(),
            general: "configure".into(),
            detailed: Vec::new(),
        });
        s.translated.insert(id, t.to_string());
    }
    s
}

fn total_errors(tree: &VdmTree, text: &str) -> usize {
    error_counts(&tree.check_config(text)).total_errors()
}

/// Errors attributed to the middle fragment: inside its lines, or inside a
/// view one of its lines opened.
fn middle_errors(tree: &VdmTree, frags: &[&str]) -> usize {
    let first = frags[0].lines().count() + 1;
    let last = first + frags[1].lines().count() - 1;
    let within = |n: usize| first <= n && n <= last;
    tree.check_config(&frags.join("\n"))
        .iter()
        .filter(|v| v.status.is_error() && (within(v.line_no) || v.context_line.is_some_and(within)))
        .count()
}

#[derive(Debug)]
pub struct Observed {
    pub adopted: usize,
    pub rejected: usize,
    pub errors_before: usize,
    pub errors_after: usize,
}

/// Runs the checker-guided loop on the middle fragment and compares it with a
/// direct simulation of the adoption rule.
pub fn check_syntax_loop(env: &Env, sc: &Scenario) -> Result<Observed, String> {
    let tree = &env.target_tree;
    let mut st = state(&sc.base.fragments);
    let chat = Scripted::new(sc.replies.iter().map(|r| reply(r)));
    let before = total_errors(tree, &st.assemble().0);
    refine_syntax(&chat, &env.ctx(), &mut st, "f2", None, 3).map_err(|e| e.to_string())?;
    let after = total_errors(tree, &st.assemble().0);

    // simulation
    let [f1, f2, f3] = sc.base.fragments;
    let mut current = f2;
    let mut adopted = 0;
    let mut rejected = 0;
    for cand in &sc.replies {
        let (cur_frag, cur_total) = (middle_errors(tree, &[f1, current, f3]), total_errors(tree, &[f1, current, f3].join("\n")));
        if cur_frag == 0 {
            break;
        }
        if *cand == NO_BLOCK {
            rejected += 1;
            break;
        }
        let frag = middle_errors(tree, &[f1, cand, f3]);
        let total = total_errors(tree, &[f1, cand, f3].join("\n"));
        if frag < cur_frag && total <= cur_total {
            adopted += 1;
            current = cand;
        } else {
            rejected += 1;
            break;
        }
    }
    if st.translated["f2"] != current {
        return Err(format!("{}: final fragment {:?}, simulation {:?}", sc.name, st.translated["f2"], current));
    }
    let entries: Vec<_> = st.history.iter().filter(|h| h.prompt_id == "syntax_refinement").collect();
    let got_adopted = entries.iter().filter(|h| h.adopted == Some(true)).count();
    if got_adopted != adopted || entries.len() != adopted + rejected {
        return Err(format!("{}: history {got_adopted}/{} vs simulation {adopted}/{}", sc.name, entries.len(), adopted + rejected));
    }
    for h in &entries {
        if h.adopted == Some(true) && h.errors_after >= h.errors_before {
            return Err(format!("{}: adopted without a decrease {h:?}", sc.name));
        }
    }
    if after > before {
        return Err(format!("{}: total errors rose {before} -> {after}", sc.name));
    }
    Ok(Observed {
        adopted,
        rejected,
        errors_before: before,
        errors_after: after,
    })
}

/// Runs semantic refinement over three inconsistent units, each answered by a
/// whole candidate translation, and compares it with the `<=` guard simulated directly.
pub fn check_semantic_loop(env: &Env, sc: &Scenario) -> Result<Observed, String> {
    let tree = &env.target_tree;
    let [f1, f2, f3] = sc.base.fragments;
    let target = [f1, f2, f3].join("\n");
    let unit = |t: &str| ReportUnit {
        source_fragment: "port 1/1/1".into(),
        target_fragment: t.into(),
        is_consistent: false,
        comment: "differs".into(),
        lines: None,
    };
    let r0 = SemanticReport {
        units: vec![unit(f1), unit(f2), unit(f3)],
        round: 0,
        degraded: false,
    };
    let candidates: Vec<String> = sc.replies.iter().map(|r| if *r == NO_BLOCK { NO_BLOCK.to_string() } else { [f1, r, f3].join("\n") }).collect();
    let chat = Scripted::new(candidates.iter().map(|c| reply(c)));
    let embed = HashingEmbedder::default();
    let providers = Providers { chat: &chat, embed: &embed };
    let out = semantic_refine(providers, &env.ctx(), "configure\n    port 1/1/1\n    exit", &target, &r0).map_err(|e| e.to_string())?;

    let mut current = target.clone();
    let mut adopted = 0;
    let mut rejected = 0;
    for c in &candidates {
        if c == NO_BLOCK {
            rejected += 1;
            continue;
        }
        if total_errors(tree, c) <= total_errors(tree, &current) {
            current = c.clone();
            adopted += 1;
        } else {
            rejected += 1;
        }
    }
    if out.target != current {
        return Err(format!("{}: semantic result differs from simulation", sc.name));
    }
    if out.attempts.iter().filter(|a| a.adopted).count() != adopted {
        return Err(format!("{}: adopted count differs from simulation", sc.name));
    }
    for a in &out.attempts {
        if a.adopted && a.errors_after.is_none_or(|e| e > a.errors_before) {
            return Err(format!("{}: adopted a worse candidate {a:?}", sc.name));
        }
    }
    let (before, after) = (total_errors(tree, &target), total_errors(tree, &out.target));
    if after > before || out.errors_final != after || out.errors_initial != before {
        return Err(format!("{}: syntax errors {before} -> {after}", sc.name));
    }
    Ok(Observed {
        adopted,
        rejected,
        errors_before: before,
        errors_after: after,
    })
}
