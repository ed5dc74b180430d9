#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use expert_router::executor::{DispatchError, ExpertReply, ExpertTransport, Outcome, OutcomeStatus};
use expert_router::ingest::{load_perturbation_pairs, parse_bddl, parse_tasks_jsonl, IngestError, PerturbationPair};
use expert_router::router::{LmRouter, SimilarityRouter};
use expert_router::router_lm::{FewShotExample, RuleBasedLm};
use expert_router::sexpr::parse_document;
use expert_router::*;
use parking_lot::Mutex;
use serde_json::Value;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn read_fixture(rel: &str) -> Vec<u8> {
    std::fs::read(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn registry() -> Registry {
    Registry::from_json(std::str::from_utf8(&read_fixture("registry.json")).unwrap()).unwrap()
}

pub fn tasks(rel: &str) -> Vec<TaskInstruction> {
    parse_tasks_jsonl(&read_fixture(rel)).unwrap()
}

pub fn pairs(rel: &str) -> Vec<PerturbationPair> {
    load_perturbation_pairs(&read_fixture(rel)).unwrap()
}

pub fn rule_lm() -> Arc<RuleBasedLm> {
    Arc::new(RuleBasedLm::from_json(std::str::from_utf8(&read_fixture("rules.json")).unwrap()).unwrap())
}

pub fn examples() -> Vec<FewShotExample> {
    serde_json::from_slice(&read_fixture("examples.json")).unwrap()
}

/// Built-in embedder plus the rule LM with the bundled few-shot examples.
pub fn router(clock: Arc<dyn Clock>) -> Router {
    let similarity = SimilarityRouter::new(Arc::new(HashingEmbedder::default()));
    let lm = LmRouter::new(rule_lm()).with_examples(examples());
    Router::new(similarity, Some(lm), clock)
}

/// In-process expert: answers success with the expert's adapter id as the
/// trajectory unless the text contains "fail"; refuses experts listed as down.
#[derive(Default)]
pub struct MockExperts {
    pub down: Vec<ExpertId>,
    pub received: Mutex<Vec<(String, String)>>,
}

impl ExpertTransport for MockExperts {
    fn dispatch(&self, expert: &ExpertProfile, task: &TaskInstruction) -> Result<ExpertReply, DispatchError> {
        self.received.lock().push((task.task_id.clone(), expert.adapter_id.clone()));
        if self.down.contains(&expert.expert_id) {
            return Err(DispatchError::Transport(format!("connection refused: {}", expert.endpoint)));
        }
        let success = !task.text.contains("fail");
        Ok(ExpertReply {
            trajectory: expert.adapter_id.as_bytes().to_vec(),
            outcome: Outcome {
                status: if success { OutcomeStatus::Success } else { OutcomeStatus::Failure },
                metric_name: "sr".into(),
                metric_value: if success { 1.0 } else { 0.0 },
            },
        })
    }
}

pub const GB: u64 = 1_000_000_000;
pub const MB: u64 = 1_000_000;

pub fn adapter_sizes(reg: &Registry) -> Vec<u64> {
    reg.experts().iter().map(|e| e.adapter_size_bytes).collect()
}

pub fn manager(reg: &Registry, mode: ServingMode, clock: Arc<dyn Clock>) -> Arc<AdapterManager> {
    let state =
        ServingState::configure(mode, 4 * GB, &adapter_sizes(reg), 8 * GB, adapter::DEFAULT_SWAP_LATENCY_MS).unwrap();
    Arc::new(AdapterManager::new(state, clock))
}

pub fn expected(dir: &str) -> BTreeMap<String, Value> {
    serde_json::from_slice(&read_fixture(&format!("{dir}/expected.json"))).unwrap()
}

pub fn listed(dir: &str, ext: &str) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(fixture(dir))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(ext))
        .collect();
    names.sort();
    names
}

fn num(v: &Value, key: &str) -> Option<usize> {
    v.get(key).and_then(Value::as_u64).map(|n| n as usize)
}

/// Checks every `.bddl` fixture against `bddl/expected.json`. Returns
/// (files checked, of which malformed).
pub fn check_bddl_fixtures() -> Result<(usize, usize), String> {
    let exp = expected("bddl");
    if listed("bddl", ".bddl") != exp.keys().cloned().collect::<Vec<_>>() {
        return Err("bddl fixtures and expected.json disagree on the file list".into());
    }
    let mut bad = 0;
    for (name, want) in &exp {
        let stem = name.trim_end_matches(".bddl");
        let got = parse_bddl(&read_fixture(&format!("bddl/{name}")), stem);
        match (want.get("text").and_then(Value::as_str), want.get("error").and_then(Value::as_str)) {
            (Some(text), _) => {
                let t = got.map_err(|e| format!("{name}: unexpected error {e}"))?;
                if t.text != text || t.task_id != stem {
                    return Err(format!("{name}: got ({:?}, {:?})", t.task_id, t.text));
                }
            }
            (None, Some(kind)) => {
                bad += 1;
                let err = got.err().ok_or_else(|| format!("{name}: parsed but should fail with {kind}"))?;
                let ok = match (kind, &err) {
                    ("sexpr", IngestError::Sexpr(e)) => Some(e.offset) == num(want, "offset"),
                    ("utf8", IngestError::Utf8 { offset }) => Some(*offset) == num(want, "offset"),
                    ("extraction", IngestError::Extraction) => true,
                    _ => false,
                };
                if !ok {
                    return Err(format!("{name}: expected {want}, got {err:?}"));
                }
            }
            _ => return Err(format!("{name}: malformed expectation")),
        }
    }
    Ok((exp.len(), bad))
}

/// Print-then-parse reproduces the tree of every well-formed `.bddl` fixture.
pub fn check_bddl_round_trip() -> Result<usize, String> {
    let mut n = 0;
    for (name, want) in expected("bddl") {
        if want.get("text").is_none() {
            continue;
        }
        let src = String::from_utf8(read_fixture(&format!("bddl/{name}"))).map_err(|e| e.to_string())?;
        let doc = parse_document(&src).map_err(|e| format!("{name}: {e}"))?;
        let printed = doc.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
        if parse_document(&printed).as_ref() != Ok(&doc) {
            return Err(format!("{name}: round trip changed the tree"));
        }
        n += 1;
    }
    Ok(n)
}

/// Checks every `.jsonl` fixture against `jsonl/expected.json`. Returns
/// (files checked, of which malformed).
pub fn check_jsonl_fixtures() -> Result<(usize, usize), String> {
    let exp = expected("jsonl");
    if listed("jsonl", ".jsonl") != exp.keys().cloned().collect::<Vec<_>>() {
        return Err("jsonl fixtures and expected.json disagree on the file list".into());
    }
    let mut bad = 0;
    for (name, want) in &exp {
        let got = parse_tasks_jsonl(&read_fixture(&format!("jsonl/{name}")));
        if let Some(rows) = want.get("tasks").and_then(Value::as_array) {
            let tasks = got.map_err(|e| format!("{name}: unexpected error {e}"))?;
            let want: Vec<(Option<&str>, Option<&str>, Option<&str>)> =
                rows.iter().map(|r| (r[0].as_str(), r[1].as_str(), r[2].as_str())).collect();
            let got: Vec<_> = tasks
                .iter()
                .map(|t| (Some(t.task_id.as_str()), Some(t.text.as_str()), t.truth_label.as_deref()))
                .collect();
            if got != want {
                return Err(format!("{name}: got {got:?}"));
            }
            continue;
        }
        bad += 1;
        let kind = want["error"].as_str().unwrap_or("");
        let err = got.err().ok_or_else(|| format!("{name}: parsed but should fail with {kind}"))?;
        let ok = match (kind, &err) {
            ("json", IngestError::Json { line, .. }) => Some(*line) == num(want, "line"),
            ("schema", IngestError::Schema { line, .. }) => Some(*line) == num(want, "line"),
            ("utf8", IngestError::Utf8 { offset }) => Some(*offset) == num(want, "offset"),
            _ => false,
        };
        if !ok {
            return Err(format!("{name}: expected {want}, got {err:?}"));
        }
    }
    Ok((exp.len(), bad))
}
