//! Prompt-driven routing: prompt assembly, LM clients and answer parsing.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::normalize;
use crate::registry::{Catalog, ExpertId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub task_text: String,
    pub expert_id: ExpertId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl LmRequest {
    pub fn new(prompt: String, max_tokens: u32) -> Self {
        LmRequest { prompt, max_tokens, temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmResponse {
    pub text: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("LM transport error: {0}")]
    Transport(String),
    #[error("LM protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("expert pool is empty")]
    EmptyPool,
    #[error("few-shot example references expert {expert_id} but only {k} experts exist")]
    ExampleOutOfRange { expert_id: ExpertId, k: usize },
    #[error("prompt template is missing placeholder {0}")]
    MissingPlaceholder(&'static str),
    #[error("unknown placeholder {{{{{0}}}}} in prompt template")]
    UnknownPlaceholder(String),
    #[error("cannot read prompt template: {0}")]
    Io(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no in-range expert index in LM response {response:?}")]
pub struct UnparsableResponse {
    pub response: String,
}

pub trait LmClient: Send + Sync {
    fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError>;
}

pub const DEFAULT_TEMPLATE: &str = "\
You are a dispatcher that assigns a robot task to exactly one specialist.

Specialists:
{{experts}}

Read the task, compare it with every specialist description and reason step by step \
about which specialist fits best. Write your reasoning first, then finish with a final \
line of the form \"Output: <id>\" (Output: {{choices}}).

Examples:
{{examples}}

Task: {{task}}
Reasoning:";

const PLACEHOLDERS: [&str; 4] = ["experts", "examples", "task", "choices"];

/// Plain-text prompt template with `{{experts}}`, `{{examples}}`, `{{task}}`
/// and the optional `{{choices}}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate { text: DEFAULT_TEMPLATE.to_string() }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        for (name, _) in segments(&text) {
            if let Some(name) = name {
                if !PLACEHOLDERS.contains(&name) {
                    return Err(PromptError::UnknownPlaceholder(name.to_string()));
                }
            }
        }
        for required in ["{{experts}}", "{{examples}}", "{{task}}"] {
            if !text.contains(required) {
                return Err(PromptError::MissingPlaceholder(required));
            }
        }
        Ok(PromptTemplate { text })
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        Self::new(text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    fn render(&self, experts: &str, examples: &str, task: &str, choices: &str) -> String {
        let mut out = String::with_capacity(self.text.len() + experts.len() + examples.len() + task.len());
        for (name, literal) in segments(&self.text) {
            match name {
                Some("experts") => out.push_str(experts),
                Some("examples") => out.push_str(examples),
                Some("task") => out.push_str(task),
                Some("choices") => out.push_str(choices),
                _ => out.push_str(literal),
            }
        }
        out
    }
}

/// Splits a template into literal runs and `{{name}}` placeholders in a single pass,
/// so substituted text is never rescanned.
fn segments(text: &str) -> Vec<(Option<&str>, &str)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start + 2..].find("}}") else { break };
        let name = &rest[start + 2..start + 2 + len];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            out.push((None, &rest[..start + 2]));
            rest = &rest[start + 2..];
            continue;
        }
        out.push((None, &rest[..start]));
        out.push((Some(name), &rest[start..start + 4 + len]));
        rest = &rest[start + 4 + len..];
    }
    out.push((None, rest));
    out
}

/// "0", "0 or 1", "0, 1, or 2", ...
pub fn choices_phrase(k: usize) -> String {
    match k {
        0 => String::new(),
        1 => "0".into(),
        2 => "0 or 1".into(),
        _ => {
            let head: Vec<String> = (0..k - 1).map(|i| i.to_string()).collect();
            format!("{}, or {}", head.join(", "), k - 1)
        }
    }
}

pub fn build_prompt(
    template: &PromptTemplate,
    task_text: &str,
    catalog: &Catalog,
    examples: &[FewShotExample],
) -> Result<String, PromptError> {
    if catalog.is_empty() {
        return Err(PromptError::EmptyPool);
    }
    let k = catalog.len();
    if let Some(bad) = examples.iter().find(|e| e.expert_id >= k) {
        return Err(PromptError::ExampleOutOfRange { expert_id: bad.expert_id, k });
    }
    let experts =
        catalog.entries.iter().map(|e| format!("ID {}: {}", e.expert_id, e.description)).collect::<Vec<_>>().join("\n");
    let examples_block = if examples.is_empty() {
        "(none)".to_string()
    } else {
        examples
            .iter()
            .map(|e| format!("Task: {}\nOutput: {}", e.task_text, e.expert_id))
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    Ok(template.render(&experts, &examples_block, task_text, &choices_phrase(k)))
}

/// Extracts the chosen expert from an LM answer. The integer after the last
/// `Output:` wins; otherwise a response that is a bare integer is accepted.
pub fn parse_expert_index(response_text: &str, k: usize) -> Result<ExpertId, UnparsableResponse> {
    let in_range = |n: Option<usize>| n.filter(|n| *n < k);

    if let Some(pos) = response_text.rfind("Output:") {
        let tail = response_text[pos + "Output:".len()..].trim_start();
        let digits: String = tail.chars().take_while(char::is_ascii_digit).collect();
        if let Some(id) = in_range(digits.parse().ok()) {
            return Ok(id);
        }
    }
    if let Some(id) = in_range(response_text.trim().parse().ok()) {
        return Ok(id);
    }
    Err(UnparsableResponse { response: response_text.to_string() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub expert_id: ExpertId,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RuleTable {
    pub rules: Vec<KeywordRule>,
}

/// Deterministic stand-in for a language model. Reads the query task from the
/// last `Task:` line of the prompt and answers with the first rule whose
/// keyword phrase occurs in it as a whole-word sequence.
#[derive(Debug, Default)]
pub struct RuleBasedLm {
    table: RuleTable,
    calls: AtomicUsize,
}

impl RuleBasedLm {
    pub fn new(table: RuleTable) -> Self {
        RuleBasedLm { table, calls: AtomicUsize::new(0) }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// First matching rule for a task text.
    pub fn classify(&self, task_text: &str) -> Option<(ExpertId, &str)> {
        let task = format!(" {} ", normalize(task_text));
        self.table.rules.iter().find_map(|rule| {
            rule.keywords.iter().find_map(|kw| {
                let kw_norm = normalize(kw);
                (!kw_norm.is_empty() && task.contains(&format!(" {kw_norm} "))).then_some((rule.expert_id, kw.as_str()))
            })
        })
    }
}

fn query_task(prompt: &str) -> &str {
    match prompt.rfind("Task:") {
        Some(pos) => prompt[pos + "Task:".len()..].lines().next().unwrap_or("").trim(),
        None => prompt.trim(),
    }
}

impl LmClient for RuleBasedLm {
    fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let task = query_task(&request.prompt);
        let text = match self.classify(task) {
            Some((id, kw)) => format!("The task mentions \"{kw}\", which is covered by specialist {id}.\nOutput: {id}"),
            None => "I am not sure which specialist fits this task.".to_string(),
        };
        Ok(LmResponse { text })
    }
}

/// Client for a completion service speaking
/// `{"prompt", "max_tokens", "temperature"}` -> `{"text"}`.
#[derive(Debug, Clone)]
pub struct RemoteLm {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteLm {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        RemoteLm { endpoint: endpoint.into(), agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }
}

impl LmClient for RemoteLm {
    fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        let resp = match self.agent.post(&self.endpoint).send_json(request) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => {
                return Err(LmError::Protocol(format!("LM service returned HTTP {code}")))
            }
            Err(e) => return Err(LmError::Transport(e.to_string())),
        };
        resp.into_json::<LmResponse>().map_err(|e| LmError::Protocol(format!("bad response body: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{CatalogEntry, DescriptionStyle};

    fn catalog(descs: &[&str]) -> Catalog {
        Catalog {
            style: DescriptionStyle::Simple,
            entries: descs
                .iter()
                .enumerate()
                .map(|(i, d)| CatalogEntry { expert_id: i, description: d.to_string() })
                .collect(),
        }
    }

    #[test]
    fn prompt_lists_experts_and_choices() {
        let c = catalog(&["arms only", "arms and waist", "full upper body"]);
        let p = build_prompt(&PromptTemplate::default(), "pour the liquid", &c, &[]).unwrap();
        assert!(p.contains("ID 0: arms only\nID 1: arms and waist\nID 2: full upper body"));
        assert!(p.contains("Output: 0, 1, or 2"));
        assert!(p.trim_end().ends_with("Task: pour the liquid\nReasoning:"));
        assert_eq!(p, build_prompt(&PromptTemplate::default(), "pour the liquid", &c, &[]).unwrap());
    }

    #[test]
    fn prompt_section_order() {
        let c = catalog(&["a", "b", "c"]);
        let ex = [FewShotExample { task_text: "stack the box".into(), expert_id: 2 }];
        let p = build_prompt(&PromptTemplate::default(), "QUERY", &c, &ex).unwrap();
        let experts = p.find("ID 0: a").unwrap();
        let instr = p.find("Output: 0, 1, or 2").unwrap();
        let example = p.find("Task: stack the box\nOutput: 2").unwrap();
        let query = p.find("Task: QUERY").unwrap();
        assert!(experts < instr && instr < example && example < query);
    }

    #[test]
    fn example_out_of_range() {
        let c = catalog(&["a", "b", "c"]);
        let ex = [FewShotExample { task_text: "x".into(), expert_id: 7 }];
        assert_eq!(
            build_prompt(&PromptTemplate::default(), "t", &c, &ex),
            Err(PromptError::ExampleOutOfRange { expert_id: 7, k: 3 })
        );
        assert_eq!(build_prompt(&PromptTemplate::default(), "t", &catalog(&[]), &[]), Err(PromptError::EmptyPool));
    }

    #[test]
    fn placeholder_text_in_inputs_is_not_expanded() {
        let c = catalog(&["{{task}}"]);
        let t = PromptTemplate::new("{{experts}}|{{examples}}|{{task}}").unwrap();
        assert_eq!(build_prompt(&t, "{{experts}}", &c, &[]).unwrap(), "ID 0: {{task}}|(none)|{{experts}}");
    }

    #[test]
    fn template_validation() {
        assert_eq!(PromptTemplate::new("{{experts}} {{task}}"), Err(PromptError::MissingPlaceholder("{{examples}}")));
        assert_eq!(
            PromptTemplate::new("{{experts}} {{examples}} {{task}} {{oops}}"),
            Err(PromptError::UnknownPlaceholder("oops".into()))
        );
        assert!(PromptTemplate::new("{ {{experts}} {{examples}} {{task}} }").is_ok());
    }

    #[test]
    fn choices() {
        assert_eq!(choices_phrase(1), "0");
        assert_eq!(choices_phrase(2), "0 or 1");
        assert_eq!(choices_phrase(3), "0, 1, or 2");
    }

    #[test]
    fn parse_cases() {
        assert_eq!(parse_expert_index("the bowl suggests...\nOutput: 1", 3), Ok(1));
        assert_eq!(parse_expert_index("2", 3), Ok(2));
        assert!(parse_expert_index("Output: 9", 3).is_err());
        assert_eq!(parse_expert_index("Output: 0 ... no wait\nOutput: 2.", 3), Ok(2));
        assert!(parse_expert_index("Output: 2 then Output: 5", 3).is_err());
        assert!(parse_expert_index("I am not sure", 3).is_err());
        assert_eq!(parse_expert_index("  0 \n", 1), Ok(0));
    }

    #[test]
    fn rule_lm_reads_last_task_line() {
        let lm =
            RuleBasedLm::new(RuleTable { rules: vec![KeywordRule { expert_id: 1, keywords: vec!["bowl".into()] }] });
        let c = catalog(&["stacks boxes", "picks and places the black bowl", "opens drawers"]);
        let ex = [FewShotExample { task_text: "put the box away".into(), expert_id: 0 }];
        let p = build_prompt(&PromptTemplate::default(), "pick up the black bowl", &c, &ex).unwrap();
        let out = lm.complete(&LmRequest::new(p, 64)).unwrap();
        assert_eq!(parse_expert_index(&out.text, 3), Ok(1));
        assert_eq!(lm.classify("pick up the black bowls"), None);
        assert_eq!(lm.calls(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn inputs() -> impl Strategy<Value = (Vec<String>, Vec<(String, usize)>, String)> {
            (1usize..6).prop_flat_map(|k| {
                (
                    proptest::collection::vec("[a-z][a-z ]{0,12}", k),
                    proptest::collection::vec(("[a-z][a-z ]{0,12}", 0..k), 0..3),
                    "[a-z][a-z ]{0,12}",
                )
            })
        }

        fn render(descs: &[String], ex: &[(String, usize)], task: &str) -> String {
            let c = catalog(&descs.iter().map(String::as_str).collect::<Vec<_>>());
            let ex: Vec<_> = ex.iter().map(|(t, id)| FewShotExample { task_text: t.clone(), expert_id: *id }).collect();
            build_prompt(&PromptTemplate::default(), task, &c, &ex).unwrap()
        }

        proptest! {
            #[test]
            fn any_single_change_changes_prompt((descs, ex, task) in inputs(), which in 0usize..3, idx in any::<prop::sample::Index>()) {
                let base = render(&descs, &ex, &task);
                let (mut d2, mut e2, mut t2) = (descs.clone(), ex.clone(), task.clone());
                match which {
                    0 => { let i = idx.index(d2.len()); d2[i].push('x'); }
                    1 if !e2.is_empty() => { let i = idx.index(e2.len()); e2[i].0.push('x'); }
                    1 => e2.push(("extra".into(), 0)),
                    _ => t2.push('x'),
                }
                prop_assert_ne!(base, render(&d2, &e2, &t2));
            }

            #[test]
            fn parse_never_out_of_range(text in "\\PC{0,40}", k in 1usize..12) {
                if let Ok(id) = parse_expert_index(&text, k) {
                    prop_assert!(id < k);
                }
            }

            #[test]
            fn conformant_answers_parse(reasoning in "[a-zA-Z0-9 .,]{0,60}", k in 1usize..12, pick in any::<prop::sample::Index>()) {
                let id = pick.index(k);
                prop_assert_eq!(parse_expert_index(&format!("{reasoning}\nOutput: {id}"), k), Ok(id));
            }
        }
    }
}
