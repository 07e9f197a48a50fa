use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use inta_core::corpus::ManualCorpus;
use inta_core::evalkit::{self, CommandMatchMode, EvalCase, RecallQuery};
use inta_core::hierarchy::{error_counts, VdmTree, VendorProfile};
use inta_core::pipeline::{divide_and_extract, ConfigDocument};
use inta_core::providers::{HashingEmbedder, Providers};
use inta_core::retrieval::{embed_rank, retrieve};
use inta_core::run::{self, RunConfig, RunError};

const EXIT_INPUT: u8 = 2;
const EXIT_CHECK: u8 = 3;
const EXIT_PROVIDER: u8 = 4;

/// Network configuration translation between CLI vendors.
#[derive(Parser)]
#[command(name = "inta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate manual page records and write a corpus file.
    Ingest {
        /// A JSON/JSONL file, or a directory of them.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a configuration against a vendor device model.
    Check {
        config: PathBuf,
        #[arg(long)]
        vdm: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        /// Print verdicts as JSON instead of a listing.
        #[arg(long)]
        json: bool,
    },
    /// Divide the source configuration and show what retrieval returns per fragment.
    Retrieve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Translate the configured source and verify the result.
    Translate {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Verify an existing translation of the configured source.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to translation.txt in the output directory.
        #[arg(long)]
        translation: Option<PathBuf>,
        /// Defaults to report.json in the output directory.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Where to write the refined translation, when refinement changes it.
        #[arg(long)]
        refined: Option<PathBuf>,
        /// Analyze only, without semantic refinement.
        #[arg(long)]
        no_refine: bool,
    },
    /// Score candidate translations against references.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vdm: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Template)]
        mode: Mode,
        /// Directory for metrics.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Annotated retrieval queries for a recall sweep.
        #[arg(long, requires = "corpus")]
        recall: Option<PathBuf>,
        /// Corpus the recall queries are ranked against.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Largest k of the recall sweep.
        #[arg(long, default_value_t = 30)]
        k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Template,
    Parameter,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(e: impl Display) -> Self {
        Self {
            code: EXIT_INPUT,
            message: e.to_string(),
        }
    }

    fn at(path: &Path, e: impl Display) -> Self {
        Self::input(format!("{}: {e}", path.display()))
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = if e.exit_code() == 4 { EXIT_PROVIDER } else { EXIT_INPUT };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<u8, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::at(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::at(path, e))
}

fn load_tree(vdm: &Path, profile: &Path) -> Result<VdmTree, Failure> {
    let profile = VendorProfile::from_json(&read(profile)?).map_err(|e| Failure::at(profile, e))?;
    VdmTree::load(&read(vdm)?, profile).map_err(|e| Failure::at(vdm, e))
}

fn ingest(input: &Path, out: &Path) -> Outcome {
    let corpus = if input.is_dir() {
        ManualCorpus::ingest_dir(input)
    } else {
        ManualCorpus::load(input)
    }
    .map_err(|e| Failure::at(input, e))?;
    write(out, &corpus.to_json())?;
    println!("{} pages written to {}", corpus.len(), out.display());
    Ok(0)
}

fn check(config: &Path, vdm: &Path, profile: &Path, json: bool) -> Outcome {
    let tree = load_tree(vdm, profile)?;
    let verdicts = tree.check_config(&read(config)?);
    if json {
        println!("{}", serde_json::to_string_pretty(&verdicts).expect("verdicts serialize"));
    } else {
        for v in &verdicts {
            println!("{:>4}  {:<12}  {}", v.line_no, v.status.to_string(), v.text);
        }
    }
    let c = error_counts(&verdicts);
    eprintln!(
        "matched {}, view errors {}, syntax errors {}, structural {}",
        c.matched, c.view_errors, c.syntax_errors, c.structural
    );
    Ok(if c.total_errors() == 0 { 0 } else { EXIT_CHECK })
}

fn debug_retrieve(config: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let inputs = cfg.load_inputs()?;
    let chat = cfg.chat_provider()?;
    let embed = cfg.embedding_provider();
    let providers = Providers {
        chat: chat.as_ref(),
        embed: embed.as_ref(),
    };
    let provider_failure = |e: &dyn Display| Failure {
        code: EXIT_PROVIDER,
        message: e.to_string(),
    };
    let doc = ConfigDocument::parse(&inputs.source_text, &inputs.source_tree, &inputs.source_corpus);
    let root_view = inputs.source_tree.profile.root_view.clone();
    let division = divide_and_extract(providers.chat, &inputs.prompts, &doc, &inputs.source_corpus, &root_view)
        .map_err(|e| provider_failure(&e))?;
    let ctx = inputs.context();
    let mut out = BTreeMap::new();
    for (fragment, intents) in &division.pairs {
        let r = retrieve(providers, &ctx.retrieval(), fragment, intents, &cfg.retrieval).map_err(|e| provider_failure(&e))?;
        out.insert(fragment.id.clone(), serde_json::json!({"intents": intents, "retrieval": r}));
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("retrieval serializes"));
    Ok(0)
}

fn translate(config: &Path, resume: bool) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let outcome = run::run_translate(&cfg, resume)?;
    let s = &outcome.report.summary;
    println!(
        "{} lines, {} mismatch, {} of {} semantic units consistent; outputs in {}",
        s.lines,
        s.mismatch,
        s.consistent_units,
        s.units,
        outcome.output_dir.display()
    );
    Ok(0)
}

fn verify(config: &Path, translation: Option<PathBuf>, report: Option<PathBuf>, refined: Option<PathBuf>, no_refine: bool) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let translation_path = translation.unwrap_or_else(|| cfg.output_dir.join(run::TRANSLATION_FILE));
    let report_path = report.unwrap_or_else(|| cfg.output_dir.join(run::REPORT_FILE));
    let original = read(&translation_path)?;
    let (text, report) = run::run_verify(&cfg, &original, !no_refine)?;
    write(&report_path, &report.to_json())?;
    if text != original.trim_end_matches('\n') {
        let path = refined.unwrap_or_else(|| translation_path.with_extension("refined.txt"));
        run::write_text(&path, &text)?;
        println!("refined translation written to {}", path.display());
    }
    println!("report written to {}", report_path.display());
    Ok(0)
}

const RECALL_SWEEP: [usize; 5] = [5, 10, 15, 20, 30];

#[allow(clippy::too_many_arguments)]
fn eval(
    dataset: &Path,
    vdm: &Path,
    profile: &Path,
    mode: Mode,
    out: Option<PathBuf>,
    recall: Option<PathBuf>,
    corpus: Option<PathBuf>,
    k: usize,
) -> Outcome {
    let tree = load_tree(vdm, profile)?;
    let cases: Vec<EvalCase> = serde_json::from_str(&read(dataset)?).map_err(|e| Failure::at(dataset, e))?;
    let mode = match mode {
        Mode::Template => CommandMatchMode::TemplateOnly,
        Mode::Parameter => CommandMatchMode::ParameterSensitive,
    };
    let evaluation = evalkit::evaluate(&cases, &tree, mode).map_err(|e| Failure::at(dataset, e))?;
    let table = evaluation.to_csv();
    print!("{table}");
    let mut summary = serde_json::json!({"cases": evaluation.cases, "metrics": evaluation.summary});
    if let Some(recall_path) = recall {
        if k == 0 {
            return Err(Failure::input("--k must be at least 1"));
        }
        let corpus_path = corpus.expect("clap enforces --corpus with --recall");
        let corpus = ManualCorpus::load(&corpus_path).map_err(|e| Failure::at(&corpus_path, e))?;
        let queries: Vec<RecallQuery> =
            serde_json::from_str(&read(&recall_path)?).map_err(|e| Failure::at(&recall_path, e))?;
        let ids: Vec<String> = corpus.pages().map(|p| p.id.clone()).collect();
        let embedder = HashingEmbedder::default();
        let mut ranked = BTreeMap::new();
        for q in &queries {
            let r = embed_rank(&embedder, &q.query, &ids, &corpus, k).map_err(|e| Failure::at(&recall_path, e))?;
            ranked.insert(q.id.clone(), r.into_iter().map(|(id, _)| id).collect::<Vec<_>>());
        }
        let mut ks: Vec<usize> = RECALL_SWEEP.iter().copied().filter(|x| *x < k).collect();
        ks.push(k);
        let mut curve = BTreeMap::new();
        for kk in ks {
            let r = evalkit::recall_at_k(&queries, &ranked, kk).map_err(Failure::input)?;
            println!("recall@{kk},{r:.4}");
            curve.insert(format!("recall@{kk}"), r);
        }
        summary["recall"] = serde_json::json!(curve);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).map_err(|e| Failure::at(&dir, e))?;
        write(&dir.join("metrics.csv"), &table)?;
        let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
        s.push('\n');
        write(&dir.join("summary.json"), &s)?;
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Ingest { input, out } => ingest(&input, &out),
        Command::Check {
            config,
            vdm,
            profile,
            json,
        } => check(&config, &vdm, &profile, json),
        Command::Retrieve { config } => debug_retrieve(&config),
        Command::Translate { config, resume } => translate(&config, resume),
        Command::Verify {
            config,
            translation,
            report,
            refined,
            no_refine,
        } => verify(&config, translation, report, refined, no_refine),
        Command::Eval {
            dataset,
            vdm,
            profile,
            mode,
            out,
            recall,
            corpus,
            k,
        } => eval(&dataset, &vdm, &profile, mode, out, recall, corpus, k),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
