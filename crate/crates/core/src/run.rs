//! Run configuration and the file-level entry points behind the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ManualCorpus;
use crate::evalkit;
use crate::hierarchy::{VdmTree, VendorProfile};
use crate::pipeline::{run_pipeline, HistoryEntry, IntentSet, PipelineContext, PipelineError, PipelineParams, TranslationState};
use crate::providers::prompt::PromptLibrary;
use crate::providers::{
    sha256_hex, CachingEmbedder, ChatProvider, EmbeddingProvider, HashingEmbedder, MockChat, OpenAiChat, OpenAiEmbedder,
    ProviderConfig, Providers,
};
use crate::retrieval::{RetrievalParams, RetrievalResult};
use crate::verification::{
    assemble_report, semantic_analyze, semantic_refine, verify_syntax, Provenance, SemanticAttempt, SemanticReport,
    TranslationReport, VerifyError,
};

pub const TRANSLATION_FILE: &str = "translation.txt";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const AUDIT_FILE: &str = "audit.json";

#[derive(Debug, Error)]
pub enum RunError {
    /// Missing or malformed input files and configuration.
    #[error("{0}")]
    Input(String),
    /// A chat or embedding backend failed, or its replies stayed unusable.
    #[error("{0}")]
    Provider(String),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Input(_) | RunError::Output { .. } => 2,
            RunError::Provider(_) => 4,
        }
    }
}

impl From<PipelineError> for RunError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Checkpoint { path, message } => RunError::Output { path, message },
            PipelineError::Prompt(p) => RunError::Input(p.to_string()),
            other => RunError::Provider(other.to_string()),
        }
    }
}

impl From<VerifyError> for RunError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Prompt(_) | VerifyError::InvalidInput(_) | VerifyError::CoverageGap(_) => RunError::Input(e.to_string()),
            other => RunError::Provider(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatBackend {
    /// Scripted replies from a JSON file of `{"match", "reply"}` entries.
    Mock { script: PathBuf },
    Http(ProviderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedBackend {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http(ProviderConfig),
}

fn default_dim() -> usize {
    HashingEmbedder::default().dim
}

impl Default for EmbedBackend {
    fn default() -> Self {
        EmbedBackend::Hashing { dim: default_dim() }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A run description. Relative paths are resolved against the directory of
/// the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub source_profile: PathBuf,
    pub target_profile: PathBuf,
    pub vdm_src: PathBuf,
    pub vdm_tgt: PathBuf,
    pub corpus_src: PathBuf,
    pub corpus_tgt: PathBuf,
    pub source_config: PathBuf,
    pub chat: ChatBackend,
    #[serde(default)]
    pub embedding: EmbedBackend,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub pipeline: PipelineParams,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn read(path: &Path) -> Result<String, RunError> {
    std::fs::read_to_string(path).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), RunError> {
    std::fs::write(path, contents).map_err(|e| RunError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| RunError::Input(format!("run config: {e}")))?;
        cfg.resolve(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.source_profile,
            &mut self.target_profile,
            &mut self.vdm_src,
            &mut self.vdm_tgt,
            &mut self.corpus_src,
            &mut self.corpus_tgt,
            &mut self.source_config,
            &mut self.output_dir,
        ] {
            fix(p);
        }
        if let Some(p) = self.prompts_dir.as_mut() {
            fix(p);
        }
        if let ChatBackend::Mock { script } = &mut self.chat {
            fix(script);
        }
    }

    /// Role → file, for every input file the run reads.
    pub fn input_files(&self) -> BTreeMap<&'static str, &Path> {
        let mut m = BTreeMap::from([
            ("source_profile", self.source_profile.as_path()),
            ("target_profile", self.target_profile.as_path()),
            ("vdm_src", self.vdm_src.as_path()),
            ("vdm_tgt", self.vdm_tgt.as_path()),
            ("corpus_src", self.corpus_src.as_path()),
            ("corpus_tgt", self.corpus_tgt.as_path()),
            ("source_config", self.source_config.as_path()),
        ]);
        if let ChatBackend::Mock { script } = &self.chat {
            m.insert("chat_script", script.as_path());
        }
        m
    }

    pub fn validate(&self) -> Result<(), RunError> {
        for (role, path) in self.input_files() {
            if !path.is_file() {
                return Err(RunError::Input(format!("{role}: {} does not exist", path.display())));
            }
        }
        if let Some(dir) = &self.prompts_dir {
            if !dir.is_dir() {
                return Err(RunError::Input(format!("prompts_dir: {} is not a directory", dir.display())));
            }
        }
        Ok(())
    }

    /// sha256 over the parameters, backends and the digest of each input file.
    pub fn provenance(&self) -> Result<Provenance, RunError> {
        let mut inputs = BTreeMap::new();
        for (role, path) in self.input_files() {
            let bytes = std::fs::read(path).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))?;
            inputs.insert(role.to_string(), sha256_hex(&bytes));
        }
        let backend = |b: &ChatBackend| match b {
            ChatBackend::Mock { .. } => serde_json::json!({"kind": "mock"}),
            ChatBackend::Http(c) => serde_json::json!({"kind": "http", "model": c.model}),
        };
        let embedding = match &self.embedding {
            EmbedBackend::Hashing { dim } => serde_json::json!({"kind": "hashing", "dim": dim}),
            EmbedBackend::Http(c) => serde_json::json!({"kind": "http", "model": c.model}),
        };
        let canonical = serde_json::json!({
            "inputs": inputs,
            "retrieval": self.retrieval,
            "pipeline": self.pipeline,
            "chat": backend(&self.chat),
            "embedding": embedding,
        });
        Ok(Provenance {
            digest: sha256_hex(canonical.to_string().as_bytes()),
            inputs,
        })
    }

    pub fn chat_provider(&self) -> Result<Box<dyn ChatProvider>, RunError> {
        Ok(match &self.chat {
            ChatBackend::Mock { script } => Box::new(
                MockChat::from_json(&read(script)?).map_err(|e| RunError::Input(format!("{}: {e}", script.display())))?,
            ),
            ChatBackend::Http(c) => Box::new(OpenAiChat::new(c.clone())),
        })
    }

    pub fn embedding_provider(&self) -> Box<dyn EmbeddingProvider> {
        match &self.embedding {
            EmbedBackend::Hashing { dim } => Box::new(CachingEmbedder::new(HashingEmbedder::new(*dim))),
            EmbedBackend::Http(c) => Box::new(CachingEmbedder::new(OpenAiEmbedder::new(c.clone()))),
        }
    }

    pub fn load_inputs(&self) -> Result<Inputs, RunError> {
        self.validate()?;
        let input = |path: &Path, e: &dyn std::fmt::Display| RunError::Input(format!("{}: {e}", path.display()));
        let profile = |p: &Path| VendorProfile::from_json(&read(p)?).map_err(|e| input(p, &e));
        let source_profile = profile(&self.source_profile)?;
        let target_profile = profile(&self.target_profile)?;
        let source_tree = VdmTree::load(&read(&self.vdm_src)?, source_profile).map_err(|e| input(&self.vdm_src, &e))?;
        let target_tree = VdmTree::load(&read(&self.vdm_tgt)?, target_profile).map_err(|e| input(&self.vdm_tgt, &e))?;
        let source_corpus = ManualCorpus::load(&self.corpus_src).map_err(|e| input(&self.corpus_src, &e))?;
        let target_corpus = ManualCorpus::load(&self.corpus_tgt).map_err(|e| input(&self.corpus_tgt, &e))?;
        let mut prompts = PromptLibrary::builtin();
        if let Some(dir) = &self.prompts_dir {
            prompts = prompts.with_overrides(dir).map_err(|e| RunError::Input(e.to_string()))?;
        }
        Ok(Inputs {
            source_text: read(&self.source_config)?,
            source_tree,
            target_tree,
            source_corpus,
            target_corpus,
            prompts,
        })
    }
}

/// Everything a run reads, loaded and compiled.
pub struct Inputs {
    pub source_text: String,
    pub source_tree: VdmTree,
    pub target_tree: VdmTree,
    pub source_corpus: ManualCorpus,
    pub target_corpus: ManualCorpus,
    pub prompts: PromptLibrary,
}

impl Inputs {
    pub fn context(&self) -> PipelineContext<'_> {
        PipelineContext {
            prompts: &self.prompts,
            source_tree: &self.source_tree,
            target_tree: &self.target_tree,
            source_corpus: &self.source_corpus,
            target_corpus: &self.target_corpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticAudit {
    pub r0: SemanticReport,
    pub attempts: Vec<SemanticAttempt>,
    pub errors_initial: usize,
    pub errors_final: usize,
}

/// Everything needed to retrace a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub provenance: Provenance,
    pub intents: Vec<IntentSet>,
    pub history: Vec<HistoryEntry>,
    pub retrievals: BTreeMap<String, RetrievalResult>,
    pub semantic: Option<SemanticAudit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn text_file(text: &str) -> String {
    if text.is_empty() {
        String::new()
    } else {
        format!("{text}\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub translation: String,
    pub report: TranslationReport,
    pub output_dir: PathBuf,
}

struct Verified {
    translation: String,
    report: TranslationReport,
    semantic: Option<SemanticAudit>,
}

fn verify(
    providers: Providers<'_>,
    inputs: &Inputs,
    translation: &str,
    refine: bool,
    mut degraded: Vec<String>,
    provenance: Provenance,
) -> Result<Verified, VerifyError> {
    let ctx = inputs.context();
    let (text, semantic, audit) = if translation.trim().is_empty() || inputs.source_text.trim().is_empty() {
        let empty = SemanticReport {
            units: Vec::new(),
            round: 1,
            degraded: false,
        };
        (translation.to_string(), empty, None)
    } else {
        let r0 = semantic_analyze(providers.chat, &ctx, &inputs.source_text, translation, 0)?;
        if r0.degraded {
            degraded.push("semantic analysis round 0: unparseable analysis".into());
        }
        let (text, r1, attempts, before, after) = if refine {
            let r = semantic_refine(providers, &ctx, &inputs.source_text, translation, &r0)?;
            (r.target, r.r1, r.attempts, r.errors_initial, r.errors_final)
        } else {
            let errors = crate::verification::syntax_errors(&inputs.target_tree, translation);
            let mut r1 = r0.clone();
            r1.round = 1;
            (translation.to_string(), r1, Vec::new(), errors, errors)
        };
        if refine && r1.degraded {
            degraded.push("semantic analysis round 1: unparseable analysis".into());
        }
        let audit = SemanticAudit {
            r0,
            attempts,
            errors_initial: before,
            errors_final: after,
        };
        (text, r1, Some(audit))
    };
    let tree = &inputs.target_tree;
    let verdicts = verify_syntax(tree, &text);
    let metrics = BTreeMap::from([
        ("syntax_correctness".to_string(), evalkit::syntax_correctness(tree, &text)),
        ("tree_match".to_string(), evalkit::tree_match(tree, &text)),
    ]);
    let report = assemble_report(tree, &text, &verdicts, semantic, metrics, degraded, provenance)?;
    Ok(Verified {
        translation: text,
        report,
        semantic: audit,
    })
}

/// Translation followed by verification. Writes the translation, report,
/// checkpoint and audit files into the output directory. With `resume`, an
/// existing checkpoint there is continued.
pub fn run_translate(cfg: &RunConfig, resume: bool) -> Result<RunOutcome, RunError> {
    let inputs = cfg.load_inputs()?;
    let provenance = cfg.provenance()?;
    let chat = cfg.chat_provider()?;
    let embed = cfg.embedding_provider();
    let providers = Providers {
        chat: chat.as_ref(),
        embed: embed.as_ref(),
    };
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| RunError::Output {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let previous = if resume && checkpoint.is_file() {
        Some(TranslationState::load(&checkpoint)?)
    } else {
        None
    };
    let audit_of = |state: &TranslationState, semantic: Option<SemanticAudit>, error: Option<String>| Audit {
        provenance: provenance.clone(),
        intents: state.intents.clone(),
        history: state.history.clone(),
        retrievals: state.retrievals.clone(),
        semantic,
        error,
    };
    let state = match run_pipeline(
        providers,
        &inputs.context(),
        &inputs.source_text,
        &cfg.retrieval,
        &cfg.pipeline,
        Some(&checkpoint),
        previous,
    ) {
        Ok(s) => s,
        Err(failure) => {
            let partial = failure.state.assemble().0;
            write(&out.join(TRANSLATION_FILE), &text_file(&partial))?;
            write(&out.join(AUDIT_FILE), &to_json(&audit_of(&failure.state, None, Some(failure.error.to_string()))))?;
            return Err(failure.error.into());
        }
    };
    write(&out.join(TRANSLATION_FILE), &text_file(&state.final_text))?;
    let verified = match verify(providers, &inputs, &state.final_text, true, state.degraded.clone(), provenance.clone()) {
        Ok(v) => v,
        Err(e) => {
            write(&out.join(AUDIT_FILE), &to_json(&audit_of(&state, None, Some(e.to_string()))))?;
            return Err(e.into());
        }
    };
    write(&out.join(TRANSLATION_FILE), &text_file(&verified.translation))?;
    write(&out.join(REPORT_FILE), &verified.report.to_json())?;
    write(&out.join(AUDIT_FILE), &to_json(&audit_of(&state, verified.semantic, None)))?;
    Ok(RunOutcome {
        translation: verified.translation,
        report: verified.report,
        output_dir: out.clone(),
    })
}

/// Verification of an existing translation of the configured source.
/// Returns the possibly refined translation and its report.
pub fn run_verify(cfg: &RunConfig, translation: &str, refine: bool) -> Result<(String, TranslationReport), RunError> {
    let inputs = cfg.load_inputs()?;
    let provenance = cfg.provenance()?;
    let chat = cfg.chat_provider()?;
    let embed = cfg.embedding_provider();
    let providers = Providers {
        chat: chat.as_ref(),
        embed: embed.as_ref(),
    };
    let v = verify(providers, &inputs, translation.trim_end_matches('\n'), refine, Vec::new(), provenance)?;
    Ok((v.translation, v.report))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    write(path, &text_file(text))
}
