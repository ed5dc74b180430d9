//! Route an instruction, make its expert's adapter active, dispatch the task and
//! collect the trajectory and outcome.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{plan_batches, AdapterManager, ServingError, SwapEvent};
use crate::embedder::normalize;
use crate::registry::{DescriptionStyle, ExpertId, ExpertProfile};
use crate::router::{RouteError, Router, RoutingDecision, RoutingSnapshot, Strategy};

pub const DEFAULT_DISPATCH_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub task_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_label: Option<String>,
}

impl TaskInstruction {
    pub fn new(task_id: impl Into<String>, text: impl Into<String>) -> Self {
        TaskInstruction { task_id: task_id.into(), text: text.into(), truth_label: None }
    }

    pub fn labeled(task_id: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        TaskInstruction { task_id: task_id.into(), text: text.into(), truth_label: Some(label.into()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: OutcomeStatus,
    pub metric_name: String,
    pub metric_value: f64,
}

/// What an expert sends back for one dispatched task.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertReply {
    pub trajectory: Vec<u8>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub task_id: String,
    pub expert_id: ExpertId,
    #[serde(rename = "trajectory_b64", with = "b64_bytes")]
    pub trajectory: Vec<u8>,
    pub outcome: Outcome,
    pub routing: RoutingDecision,
    pub swap: Option<SwapEvent>,
    pub dispatch_ms: u64,
    pub total_ms: u64,
}

mod b64_bytes {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("dispatch transport error: {0}")]
    Transport(String),
    #[error("expert protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("invalid task: {0}")]
    Validation(String),
    #[error("no expert selected: {0}")]
    NoExpertSelected(String),
    #[error("routing transport error: {0}")]
    RoutingTransport(String),
    #[error("dispatch transport error: {0}")]
    DispatchTransport(String),
    #[error("expert protocol error: {0}")]
    Protocol(String),
    #[error("serving error: {0}")]
    Serving(String),
}

impl ExecError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ExecError::Validation(_) => "validation",
            ExecError::NoExpertSelected(_) => "no_expert_selected",
            ExecError::RoutingTransport(_) => "routing_transport",
            ExecError::DispatchTransport(_) => "dispatch_transport",
            ExecError::Protocol(_) => "protocol",
            ExecError::Serving(_) => "serving",
        }
    }
}

impl From<RouteError> for ExecError {
    fn from(e: RouteError) -> Self {
        match e {
            RouteError::Validation(m) => ExecError::Validation(m),
            RouteError::Transport(m) => ExecError::RoutingTransport(m),
            other => ExecError::NoExpertSelected(other.to_string()),
        }
    }
}

impl From<DispatchError> for ExecError {
    fn from(e: DispatchError) -> Self {
        match e {
            DispatchError::Transport(m) => ExecError::DispatchTransport(m),
            DispatchError::Protocol(m) => ExecError::Protocol(m),
        }
    }
}

impl From<ServingError> for ExecError {
    fn from(e: ServingError) -> Self {
        ExecError::Serving(e.to_string())
    }
}

/// A failed task inside a batch.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("task {task_id}: {error}")]
pub struct TaskError {
    pub task_id: String,
    pub error: ExecError,
}

pub trait ExpertTransport: Send + Sync {
    fn dispatch(&self, expert: &ExpertProfile, task: &TaskInstruction) -> Result<ExpertReply, DispatchError>;
}

#[derive(Serialize)]
struct WireRequest<'a> {
    task_id: &'a str,
    text: &'a str,
    adapter_id: &'a str,
}

/// Validates an expert response body against the wire schema.
pub fn parse_expert_reply(body: &[u8]) -> Result<ExpertReply, DispatchError> {
    let v: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| DispatchError::Protocol(format!("response is not JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| DispatchError::Protocol("response is not a JSON object".into()))?;
    let status = match obj.get("status").and_then(|s| s.as_str()) {
        Some("success") => OutcomeStatus::Success,
        Some("failure") => OutcomeStatus::Failure,
        Some(other) => return Err(DispatchError::Protocol(format!("unknown status {other:?}"))),
        None => return Err(DispatchError::Protocol("missing \"status\"".into())),
    };
    let metric_name = obj
        .get("metric_name")
        .and_then(|m| m.as_str())
        .ok_or_else(|| DispatchError::Protocol("missing \"metric_name\"".into()))?
        .to_string();
    let metric_value = obj
        .get("metric_value")
        .and_then(|m| m.as_f64())
        .ok_or_else(|| DispatchError::Protocol("missing numeric \"metric_value\"".into()))?;
    let trajectory = match obj.get("trajectory_b64") {
        None | Some(serde_json::Value::Null) => Vec::new(),
        Some(serde_json::Value::String(s)) => {
            B64.decode(s).map_err(|e| DispatchError::Protocol(format!("bad trajectory_b64: {e}")))?
        }
        Some(_) => return Err(DispatchError::Protocol("trajectory_b64 must be a string".into())),
    };
    Ok(ExpertReply { trajectory, outcome: Outcome { status, metric_name, metric_value } })
}

/// Dispatches over HTTP: POST `{"task_id","text","adapter_id"}` to the expert endpoint.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(DEFAULT_DISPATCH_TIMEOUT)
    }
}

impl HttpTransport {
    pub fn new(deadline: Duration) -> Self {
        HttpTransport { agent: ureq::AgentBuilder::new().timeout(deadline).build() }
    }
}

impl ExpertTransport for HttpTransport {
    fn dispatch(&self, expert: &ExpertProfile, task: &TaskInstruction) -> Result<ExpertReply, DispatchError> {
        let req = WireRequest { task_id: &task.task_id, text: &task.text, adapter_id: &expert.adapter_id };
        let resp = match self.agent.post(&expert.endpoint).send_json(&req) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                return Err(DispatchError::Protocol(format!("expert returned HTTP {code}: {body}")));
            }
            Err(e) => return Err(DispatchError::Transport(e.to_string())),
        };
        let mut body = Vec::new();
        std::io::Read::read_to_end(&mut resp.into_reader(), &mut body)
            .map_err(|e| DispatchError::Transport(e.to_string()))?;
        parse_expert_reply(&body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceKind {
    Routed { expert_id: ExpertId },
    Swapped { from: Option<ExpertId>, to: ExpertId },
    Dispatched { expert_id: ExpertId },
    Failed { code: String },
}

/// One step of the execution log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub task_id: String,
    #[serde(flatten)]
    pub kind: TraceKind,
}

pub struct Executor {
    router: Router,
    manager: Arc<AdapterManager>,
    transport: Arc<dyn ExpertTransport>,
    trace: Mutex<Vec<TraceEvent>>,
}

impl Executor {
    pub fn new(router: Router, manager: Arc<AdapterManager>, transport: Arc<dyn ExpertTransport>) -> Self {
        Executor { router, manager, transport, trace: Mutex::new(Vec::new()) }
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn manager(&self) -> &Arc<AdapterManager> {
        &self.manager
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().clone()
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut *self.trace.lock())
    }

    fn log(&self, task_id: &str, kind: TraceKind) {
        let mut t = self.trace.lock();
        let seq = t.len() as u64;
        t.push(TraceEvent { seq, task_id: task_id.to_string(), kind });
    }

    fn fail(&self, task_id: &str, err: ExecError) -> ExecError {
        self.log(task_id, TraceKind::Failed { code: err.code().to_string() });
        err
    }

    fn route(
        &self,
        snapshot: &RoutingSnapshot,
        task: &TaskInstruction,
        strategy: Strategy,
        style: DescriptionStyle,
    ) -> Result<RoutingDecision, ExecError> {
        if normalize(&task.text).is_empty() {
            return Err(self.fail(&task.task_id, ExecError::Validation("task text is empty".into())));
        }
        let decision =
            self.router.route(snapshot, &task.text, strategy, style).map_err(|e| self.fail(&task.task_id, e.into()))?;
        if decision.abstained {
            return Err(self.fail(
                &task.task_id,
                ExecError::NoExpertSelected("router abstained: top-two score margin too small".into()),
            ));
        }
        self.log(&task.task_id, TraceKind::Routed { expert_id: decision.expert_id });
        Ok(decision)
    }

    /// Swap (if needed) then dispatch a task whose routing is already decided.
    fn run_routed(
        &self,
        snapshot: &RoutingSnapshot,
        task: &TaskInstruction,
        decision: RoutingDecision,
    ) -> Result<ExecutionResult, ExecError> {
        let clock = self.manager.clock().clone();
        let start = clock.now_ms();
        let expert = snapshot
            .registry()
            .get(decision.expert_id)
            .map_err(|e| self.fail(&task.task_id, ExecError::NoExpertSelected(e.to_string())))?;

        let (lease, swap) = self.manager.acquire(expert.expert_id).map_err(|e| self.fail(&task.task_id, e.into()))?;
        if let Some(ev) = swap {
            self.log(&task.task_id, TraceKind::Swapped { from: ev.from_expert, to: ev.to_expert });
        }
        let dispatch_start = clock.now_ms();
        let reply = self.transport.dispatch(expert, task);
        let dispatch_ms = clock.now_ms().saturating_sub(dispatch_start);
        drop(lease);

        let reply = reply.map_err(|e| self.fail(&task.task_id, e.into()))?;
        self.log(&task.task_id, TraceKind::Dispatched { expert_id: expert.expert_id });
        let total_ms = decision.elapsed_ms + clock.now_ms().saturating_sub(start);
        Ok(ExecutionResult {
            task_id: task.task_id.clone(),
            expert_id: expert.expert_id,
            trajectory: reply.trajectory,
            outcome: reply.outcome,
            routing: decision,
            swap,
            dispatch_ms,
            total_ms,
        })
    }

    pub fn execute(
        &self,
        snapshot: &RoutingSnapshot,
        task: &TaskInstruction,
        strategy: Strategy,
        style: DescriptionStyle,
    ) -> Result<ExecutionResult, ExecError> {
        let decision = self.route(snapshot, task, strategy, style)?;
        self.run_routed(snapshot, task, decision)
    }

    /// Executes every task; failures are recorded per task and never abort the
    /// batch. With `batching` on, all tasks are routed first and then run
    /// grouped by expert. Results are returned in input order either way.
    pub fn execute_batch(
        &self,
        snapshot: &RoutingSnapshot,
        tasks: &[TaskInstruction],
        strategy: Strategy,
        style: DescriptionStyle,
        batching: bool,
    ) -> Vec<Result<ExecutionResult, TaskError>> {
        let mut seen = HashSet::new();
        let duplicate: Vec<bool> = tasks.iter().map(|t| !seen.insert(t.task_id.as_str())).collect();
        let wrap = |task: &TaskInstruction, r: Result<ExecutionResult, ExecError>| {
            r.map_err(|error| TaskError { task_id: task.task_id.clone(), error })
        };
        let dup_error = |task: &TaskInstruction| {
            self.fail(&task.task_id, ExecError::Validation(format!("duplicate task_id {:?} in batch", task.task_id)))
        };

        if !batching {
            return tasks
                .iter()
                .zip(&duplicate)
                .map(|(task, &dup)| {
                    let r = if dup { Err(dup_error(task)) } else { self.execute(snapshot, task, strategy, style) };
                    wrap(task, r)
                })
                .collect();
        }

        let mut results: Vec<Option<Result<ExecutionResult, ExecError>>> = vec![None; tasks.len()];
        let mut decisions: Vec<Option<RoutingDecision>> = vec![None; tasks.len()];
        let mut assignments = Vec::new();
        for (i, task) in tasks.iter().enumerate() {
            if duplicate[i] {
                results[i] = Some(Err(dup_error(task)));
                continue;
            }
            match self.route(snapshot, task, strategy, style) {
                Ok(d) => {
                    assignments.push((i, d.expert_id));
                    decisions[i] = Some(d);
                }
                Err(e) => results[i] = Some(Err(e)),
            }
        }
        for (_, group) in plan_batches(&assignments) {
            for i in group {
                let decision = decisions[i].take().expect("routed task has a decision");
                results[i] = Some(self.run_routed(snapshot, &tasks[i], decision));
            }
        }
        tasks.iter().zip(results).map(|(task, r)| wrap(task, r.expect("every task has a result"))).collect()
    }
}
