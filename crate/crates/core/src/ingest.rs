//! Task sources: `tasks.jsonl` metadata, `.bddl` problem files and
//! perturbation-pair files.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::normalize;
use crate::executor::TaskInstruction;
use crate::sexpr::{parse_document, SExpr, SexprError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Utf8 { offset: usize },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("s-expression parse error: {0}")]
    Sexpr(#[from] SexprError),
    #[error("no (:language ...) clause or (problem ...) name found")]
    Extraction,
    #[error("perturbation file: {0}")]
    Pairs(String),
}

/// JSON field names read from each `tasks.jsonl` line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    pub task_id: String,
    pub instruction: String,
    pub category: String,
}

impl Default for FieldMapping {
    fn default() -> Self {
        FieldMapping { task_id: "task_id".into(), instruction: "instruction".into(), category: "category".into() }
    }
}

fn utf8(bytes: &[u8]) -> Result<&str, IngestError> {
    std::str::from_utf8(bytes).map_err(|e| IngestError::Utf8 { offset: e.valid_up_to() })
}

pub fn parse_tasks_jsonl(bytes: &[u8]) -> Result<Vec<TaskInstruction>, IngestError> {
    parse_tasks_jsonl_with(bytes, &FieldMapping::default())
}

/// One task per non-blank line. Lines without an id get `line-<n>` (1-based).
pub fn parse_tasks_jsonl_with(bytes: &[u8], fields: &FieldMapping) -> Result<Vec<TaskInstruction>, IngestError> {
    let text = utf8(bytes)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| IngestError::Json { line, message: e.to_string() })?;
        let obj =
            v.as_object().ok_or_else(|| IngestError::Schema { line, message: "expected a JSON object".into() })?;
        let text = match obj.get(&fields.instruction) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(_) => {
                return Err(IngestError::Schema { line, message: format!("{:?} must be a string", fields.instruction) })
            }
            None => return Err(IngestError::Schema { line, message: format!("missing {:?}", fields.instruction) }),
        };
        if normalize(&text).is_empty() {
            return Err(IngestError::Schema { line, message: "instruction is empty".into() });
        }
        let task_id = match obj.get(&fields.task_id) {
            None | Some(serde_json::Value::Null) => format!("line-{line}"),
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(_) => {
                return Err(IngestError::Schema {
                    line,
                    message: format!("{:?} must be a string or number", fields.task_id),
                })
            }
        };
        let truth_label = match obj.get(&fields.category) {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(_) => {
                return Err(IngestError::Schema { line, message: format!("{:?} must be a string", fields.category) })
            }
        };
        out.push(TaskInstruction { task_id, text, truth_label });
    }
    Ok(out)
}

fn language_text(clause: &[SExpr]) -> Option<String> {
    let parts: Vec<&str> = clause[1..].iter().filter_map(SExpr::as_text).collect();
    let joined = parts.join(" ");
    (!joined.trim().is_empty()).then(|| joined.trim().to_string())
}

/// Extracts the task text from a BDDL document: the `(:language ...)` clause if
/// present, else the `(problem <name>)` name with underscores turned into
/// spaces. `task_id` is `fallback_name` unless that is empty, then the problem
/// name. The truth label is left for the caller.
pub fn parse_bddl(bytes: &[u8], fallback_name: &str) -> Result<TaskInstruction, IngestError> {
    let src = utf8(bytes)?;
    let doc = parse_document(src)?;
    let problem = doc
        .iter()
        .find_map(|e| e.find_list("problem"))
        .and_then(|l| l.get(1))
        .and_then(SExpr::as_text)
        .map(str::to_string);
    let text = doc
        .iter()
        .find_map(|e| e.find_list(":language"))
        .and_then(language_text)
        .or_else(|| problem.as_ref().map(|p| p.replace('_', " ")))
        .filter(|t| !normalize(t).is_empty())
        .ok_or(IngestError::Extraction)?;
    let task_id = if fallback_name.is_empty() {
        problem.unwrap_or_else(|| "bddl".to_string())
    } else {
        fallback_name.to_string()
    };
    Ok(TaskInstruction { task_id, text, truth_label: None })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationPair {
    pub original: TaskInstruction,
    pub perturbed: Vec<String>,
}

impl PerturbationPair {
    /// The rephrasings as tasks carrying the original's label.
    pub fn rephrasings(&self) -> Vec<TaskInstruction> {
        self.perturbed
            .iter()
            .enumerate()
            .map(|(i, text)| TaskInstruction {
                task_id: format!("{}#p{}", self.original.task_id, i + 1),
                text: text.clone(),
                truth_label: self.original.truth_label.clone(),
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct RawOriginal {
    task_id: String,
    #[serde(alias = "instruction")]
    text: String,
    #[serde(default, alias = "category")]
    truth_label: Option<String>,
}

#[derive(Deserialize)]
struct RawPair {
    original: RawOriginal,
    perturbed: Vec<String>,
}

pub fn load_perturbation_pairs(bytes: &[u8]) -> Result<Vec<PerturbationPair>, IngestError> {
    let src = utf8(bytes)?;
    let raw: Vec<RawPair> = serde_json::from_str(src).map_err(|e| IngestError::Pairs(e.to_string()))?;
    raw.into_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.perturbed.is_empty() {
                return Err(IngestError::Pairs(format!("pair {i} ({}) has no rephrasings", p.original.task_id)));
            }
            if let Some(j) = p.perturbed.iter().position(|t| normalize(t).is_empty()) {
                return Err(IngestError::Pairs(format!("pair {i} rephrasing {j} is empty")));
            }
            Ok(PerturbationPair {
                original: TaskInstruction {
                    task_id: p.original.task_id,
                    text: p.original.text,
                    truth_label: p.original.truth_label,
                },
                perturbed: p.perturbed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_single_line() {
        let t =
            parse_tasks_jsonl(br#"{"task_id":"p1","instruction":"pour the liquid","category":"arms_only"}"#).unwrap();
        assert_eq!(t, vec![TaskInstruction::labeled("p1", "pour the liquid", "arms_only")]);
    }

    #[test]
    fn jsonl_empty_blank_and_synth_ids() {
        assert!(parse_tasks_jsonl(b"").unwrap().is_empty());
        let t = parse_tasks_jsonl(b"\n{\"instruction\":\"a\"}\n\n{\"task_id\":7,\"instruction\":\"b\"}\n").unwrap();
        assert_eq!(t[0].task_id, "line-2");
        assert_eq!(t[0].truth_label, None);
        assert_eq!(t[1].task_id, "7");
    }

    #[test]
    fn jsonl_errors() {
        assert!(matches!(parse_tasks_jsonl(b"{not json"), Err(IngestError::Json { line: 1, .. })));
        assert!(matches!(
            parse_tasks_jsonl(b"{\"instruction\":\"a\"}\n{\"task_id\":\"x\"}"),
            Err(IngestError::Schema { line: 2, .. })
        ));
        assert!(matches!(parse_tasks_jsonl(b"{\"instruction\":\"  \"}"), Err(IngestError::Schema { line: 1, .. })));
        assert_eq!(parse_tasks_jsonl(b"{\"instruction\":\"\xff\"}"), Err(IngestError::Utf8 { offset: 16 }));
    }

    #[test]
    fn jsonl_custom_fields() {
        let f = FieldMapping { task_id: "id".into(), instruction: "prompt".into(), category: "embodiment".into() };
        let t = parse_tasks_jsonl_with(br#"{"id":"x","prompt":"wave","embodiment":"full_upper_body"}"#, &f).unwrap();
        assert_eq!(t[0], TaskInstruction::labeled("x", "wave", "full_upper_body"));
    }

    #[test]
    fn bddl_name_fallback_and_language() {
        let t = parse_bddl(b"(define (problem pick_up_the_black_bowl) (:domain robosuite))", "").unwrap();
        assert_eq!(t.text, "pick up the black bowl");
        assert_eq!(t.task_id, "pick_up_the_black_bowl");

        let t = parse_bddl(b"(define (problem LIBERO_x) (:language \"put the bowl on the plate\"))", "f1").unwrap();
        assert_eq!(t.text, "put the bowl on the plate");
        assert_eq!(t.task_id, "f1");

        let t = parse_bddl(b"(define (problem p)\n  (:language Open the top drawer of the cabinet))", "f").unwrap();
        assert_eq!(t.text, "Open the top drawer of the cabinet");
    }

    #[test]
    fn bddl_errors() {
        assert_eq!(
            parse_bddl(b"((", "x"),
            Err(IngestError::Sexpr(SexprError { offset: 2, message: "unbalanced '(' opened at byte 1".into() }))
        );
        assert_eq!(parse_bddl(b"(define (domain d))", "x"), Err(IngestError::Extraction));
        assert_eq!(parse_bddl(b"(define (problem \xc3\x28))", "x"), Err(IngestError::Utf8 { offset: 17 }));
    }

    #[test]
    fn perturbation_pairs() {
        let json = br#"[{"original":{"task_id":"t1","text":"take the bell pepper from the placemat and move it to the plate","truth_label":"arms_only"},
            "perturbed":["grab the bell pepper off the placemat and put it onto the plate","move the pepper to the plate"]}]"#;
        let pairs = load_perturbation_pairs(json).unwrap();
        assert_eq!(pairs.len(), 1);
        let reph = pairs[0].rephrasings();
        assert_eq!(reph.len(), 2);
        assert_eq!(reph[0].text, "grab the bell pepper off the placemat and put it onto the plate");
        assert!(reph.iter().all(|r| r.truth_label.as_deref() == Some("arms_only")));

        let empty = br#"[{"original":{"task_id":"t1","text":"a"},"perturbed":[]}]"#;
        assert!(matches!(load_perturbation_pairs(empty), Err(IngestError::Pairs(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn line() -> impl Strategy<Value = String> {
            ("[a-z0-9]{1,6}", "[a-z][a-z ]{0,20}", proptest::option::of("[a-z_]{1,8}")).prop_map(|(id, text, cat)| {
                let mut v = serde_json::json!({"task_id": id, "instruction": text});
                if let Some(c) = cat {
                    v["category"] = serde_json::Value::String(c);
                }
                v.to_string()
            })
        }

        proptest! {
            #[test]
            fn concatenation_at_line_boundaries(a in proptest::collection::vec(line(), 0..6), b in proptest::collection::vec(line(), 0..6)) {
                let fa = a.iter().map(|l| format!("{l}\n")).collect::<String>();
                let fb = b.iter().map(|l| format!("{l}\n")).collect::<String>();
                let mut joined = parse_tasks_jsonl(fa.as_bytes()).unwrap();
                joined.extend(parse_tasks_jsonl(fb.as_bytes()).unwrap());
                prop_assert_eq!(parse_tasks_jsonl(format!("{fa}{fb}").as_bytes()).unwrap(), joined);
            }
        }
    }
}
