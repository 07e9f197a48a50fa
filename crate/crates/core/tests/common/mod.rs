#![allow(dead_code)]

pub mod adversarial;
pub mod gen;
pub mod oracle;

use std::path::PathBuf;

use inta_core::corpus::ManualCorpus;
use inta_core::hierarchy::{VdmTree, VendorProfile};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn read(rel: &str) -> String {
    let path = fixture(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn tree(vendor: &str) -> VdmTree {
    let profile = VendorProfile::from_json(&read(&format!("{vendor}/profile.json"))).unwrap();
    VdmTree::load(&read(&format!("{vendor}/vdm.json")), profile).unwrap()
}

pub fn corpus(vendor: &str) -> ManualCorpus {
    ManualCorpus::load(&fixture(&format!("{vendor}/corpus.json"))).unwrap()
}

/// Writes a run configuration for the scripted scenario that points at the
/// fixture inputs and puts outputs under `out`.
pub fn scenario_config(dir: &std::path::Path, script: &std::path::Path, out: &std::path::Path) -> PathBuf {
    let abs = |rel: &str| fixture(rel).canonicalize().unwrap();
    let cfg = serde_json::json!({
        "source_profile": abs("alpha/profile.json"),
        "target_profile": abs("beta/profile.json"),
        "vdm_src": abs("alpha/vdm.json"),
        "vdm_tgt": abs("beta/vdm.json"),
        "corpus_src": abs("alpha/corpus.json"),
        "corpus_tgt": abs("beta/corpus.json"),
        "source_config": abs("scenario/source.cfg"),
        "chat": {"kind": "mock", "script": script},
        "embedding": {"kind": "hashing", "dim": 256},
        "retrieval": {"per_intent_top_k": 15, "final_n": 20, "bm25_top_n": 200, "c2c_weight": 1.0},
        "pipeline": {"max_rounds": 3},
        "output_dir": out,
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}
