//! Serving modes, the adapter memory ledger, swap latency and batch planning.
//!
//! `AllInMemory` keeps every adapter resident next to the backbone, so switching
//! experts is free but memory grows with the pool. `DynamicLoad` keeps exactly
//! one adapter resident and pays a fixed swap latency whenever the active expert
//! changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::registry::ExpertId;

pub const DEFAULT_SWAP_LATENCY_MS: u64 = 9400;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ServingError {
    #[error("memory budget exceeded: need {required} bytes, budget {budget} bytes (short by {shortfall})")]
    BudgetExceeded { required: u64, budget: u64, shortfall: u64 },
    #[error("expert {0} has no registered adapter")]
    NotFound(ExpertId),
    #[error("invalid serving request: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServingMode {
    AllInMemory,
    DynamicLoad,
}

impl fmt::Display for ServingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServingMode::AllInMemory => "all_in_memory",
            ServingMode::DynamicLoad => "dynamic_load",
        })
    }
}

impl FromStr for ServingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "all_in_memory" | "all" => Ok(ServingMode::AllInMemory),
            "dynamic_load" | "dynamic" => Ok(ServingMode::DynamicLoad),
            other => Err(format!("unknown serving mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapEvent {
    #[serde(rename = "from")]
    pub from_expert: Option<ExpertId>,
    #[serde(rename = "to")]
    pub to_expert: ExpertId,
    pub started_at_ms: u64,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingState {
    pub mode: ServingMode,
    pub backbone_bytes: u64,
    pub adapter_sizes: BTreeMap<ExpertId, u64>,
    pub loaded: BTreeSet<ExpertId>,
    pub active: Option<ExpertId>,
    pub memory_budget_bytes: u64,
    pub swap_latency_ms: u64,
    pub swap_count: u64,
    pub total_swap_ms: u64,
    pub peak_memory_bytes: u64,
}

fn required_bytes(mode: ServingMode, backbone: u64, sizes: impl Iterator<Item = u64>) -> u64 {
    match mode {
        ServingMode::AllInMemory => backbone + sizes.sum::<u64>(),
        ServingMode::DynamicLoad => backbone + sizes.max().unwrap_or(0),
    }
}

fn check_budget(required: u64, budget: u64) -> Result<(), ServingError> {
    if required > budget {
        return Err(ServingError::BudgetExceeded { required, budget, shortfall: required - budget });
    }
    Ok(())
}

impl ServingState {
    /// `adapter_sizes[i]` is the adapter size of expert `i`.
    pub fn configure(
        mode: ServingMode,
        backbone_bytes: u64,
        adapter_sizes: &[u64],
        memory_budget_bytes: u64,
        swap_latency_ms: u64,
    ) -> Result<Self, ServingError> {
        if backbone_bytes == 0 || memory_budget_bytes == 0 {
            return Err(ServingError::Validation("backbone and budget must be positive".into()));
        }
        if adapter_sizes.contains(&0) {
            return Err(ServingError::Validation("adapter sizes must be positive".into()));
        }
        check_budget(required_bytes(mode, backbone_bytes, adapter_sizes.iter().copied()), memory_budget_bytes)?;
        let adapter_sizes: BTreeMap<_, _> = adapter_sizes.iter().copied().enumerate().collect();
        let loaded = match mode {
            ServingMode::AllInMemory => adapter_sizes.keys().copied().collect(),
            ServingMode::DynamicLoad => BTreeSet::new(),
        };
        let mut state = ServingState {
            mode,
            backbone_bytes,
            adapter_sizes,
            loaded,
            active: None,
            memory_budget_bytes,
            swap_latency_ms,
            swap_count: 0,
            total_swap_ms: 0,
            peak_memory_bytes: 0,
        };
        state.peak_memory_bytes = state.memory_used();
        Ok(state)
    }

    pub fn memory_used(&self) -> u64 {
        self.backbone_bytes + self.loaded.iter().map(|id| self.adapter_sizes[id]).sum::<u64>()
    }

    /// Adds the adapter for a newly registered expert, which must be the next dense id.
    pub fn add_adapter(&mut self, expert_id: ExpertId, size_bytes: u64) -> Result<(), ServingError> {
        if expert_id != self.adapter_sizes.len() {
            return Err(ServingError::Validation(format!(
                "expected adapter for expert {}, got {expert_id}",
                self.adapter_sizes.len()
            )));
        }
        if size_bytes == 0 {
            return Err(ServingError::Validation("adapter sizes must be positive".into()));
        }
        let sizes = self.adapter_sizes.values().copied().chain(std::iter::once(size_bytes));
        check_budget(required_bytes(self.mode, self.backbone_bytes, sizes), self.memory_budget_bytes)?;
        self.adapter_sizes.insert(expert_id, size_bytes);
        if self.mode == ServingMode::AllInMemory {
            self.loaded.insert(expert_id);
        }
        self.peak_memory_bytes = self.peak_memory_bytes.max(self.memory_used());
        Ok(())
    }

    /// Makes `expert_id` active. Only a `DynamicLoad` switch to a different
    /// adapter produces a [`SwapEvent`]; it advances `clock` by the swap latency.
    pub fn ensure_loaded(&mut self, expert_id: ExpertId, clock: &dyn Clock) -> Result<Option<SwapEvent>, ServingError> {
        if !self.adapter_sizes.contains_key(&expert_id) {
            return Err(ServingError::NotFound(expert_id));
        }
        match self.mode {
            ServingMode::AllInMemory => {
                self.active = Some(expert_id);
                Ok(None)
            }
            ServingMode::DynamicLoad if self.active == Some(expert_id) => Ok(None),
            ServingMode::DynamicLoad => {
                let event = SwapEvent {
                    from_expert: self.active,
                    to_expert: expert_id,
                    started_at_ms: clock.now_ms(),
                    duration_ms: self.swap_latency_ms,
                };
                self.loaded.clear();
                self.active = None;
                clock.advance(self.swap_latency_ms);
                self.loaded.insert(expert_id);
                self.active = Some(expert_id);
                self.swap_count += 1;
                self.total_swap_ms += self.swap_latency_ms;
                self.peak_memory_bytes = self.peak_memory_bytes.max(self.memory_used());
                Ok(Some(event))
            }
        }
    }

    /// Swaps a sequence of experts would incur when executed in order from the
    /// current state.
    pub fn swaps_for(&self, experts: impl IntoIterator<Item = ExpertId>) -> u64 {
        match self.mode {
            ServingMode::AllInMemory => 0,
            ServingMode::DynamicLoad => count_switches(self.active, experts),
        }
    }
}

/// Number of positions where the expert differs from the one before it,
/// starting from `active`.
pub fn count_switches(active: Option<ExpertId>, experts: impl IntoIterator<Item = ExpertId>) -> u64 {
    let mut current = active;
    let mut n = 0;
    for e in experts {
        if current != Some(e) {
            n += 1;
            current = Some(e);
        }
    }
    n
}

/// Groups tasks by expert. Experts keep their first-appearance order and tasks
/// keep their submission order within each group.
pub fn plan_batches<T: Clone>(assignments: &[(T, ExpertId)]) -> Vec<(ExpertId, Vec<T>)> {
    let mut schedule: Vec<(ExpertId, Vec<T>)> = Vec::new();
    let mut slot: BTreeMap<ExpertId, usize> = BTreeMap::new();
    for (task, expert) in assignments {
        let i = *slot.entry(*expert).or_insert_with(|| {
            schedule.push((*expert, Vec::new()));
            schedule.len() - 1
        });
        schedule[i].1.push(task.clone());
    }
    schedule
}

/// One group per task, in submission order; what running without batching looks like.
pub fn interleaved_schedule<T: Clone>(assignments: &[(T, ExpertId)]) -> Vec<(ExpertId, Vec<T>)> {
    assignments.iter().map(|(t, e)| (*e, vec![t.clone()])).collect()
}

/// Swap milliseconds per task when `schedule` runs from `state`.
pub fn amortized_swap_cost<T>(schedule: &[(ExpertId, Vec<T>)], state: &ServingState) -> Result<f64, ServingError> {
    let tasks: usize = schedule.iter().map(|(_, ts)| ts.len()).sum();
    if tasks == 0 {
        return Err(ServingError::Validation("schedule contains no tasks".into()));
    }
    let swaps = state.swaps_for(schedule.iter().filter(|(_, ts)| !ts.is_empty()).map(|(e, _)| *e));
    Ok((swaps * state.swap_latency_ms) as f64 / tasks as f64)
}

/// Shared, thread-safe owner of a [`ServingState`].
///
/// Swaps take the state exclusively; dispatch holds an [`ActiveLease`] (a shared
/// guard), so a pending swap waits for in-flight dispatches to drain and at most
/// one swap runs at a time.
pub struct AdapterManager {
    state: RwLock<ServingState>,
    clock: Arc<dyn Clock>,
    events: Mutex<Vec<SwapEvent>>,
    event_sink: Option<Mutex<Box<dyn Write + Send>>>,
}

pub struct ActiveLease<'a> {
    guard: RwLockReadGuard<'a, ServingState>,
}

impl ActiveLease<'_> {
    pub fn state(&self) -> &ServingState {
        &self.guard
    }
}

impl AdapterManager {
    pub fn new(state: ServingState, clock: Arc<dyn Clock>) -> Self {
        AdapterManager { state: RwLock::new(state), clock, events: Mutex::new(Vec::new()), event_sink: None }
    }

    /// Appends every swap event as one JSON line to `sink`.
    pub fn with_event_sink(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.event_sink = Some(Mutex::new(sink));
        self
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn snapshot(&self) -> ServingState {
        self.state.read().clone()
    }

    pub fn memory_used(&self) -> u64 {
        self.state.read().memory_used()
    }

    pub fn events(&self) -> Vec<SwapEvent> {
        self.events.lock().clone()
    }

    pub fn add_adapter(&self, expert_id: ExpertId, size_bytes: u64) -> Result<(), ServingError> {
        self.state.write().add_adapter(expert_id, size_bytes)
    }

    pub fn ensure_loaded(&self, expert_id: ExpertId) -> Result<Option<SwapEvent>, ServingError> {
        let (_, ev) = self.acquire(expert_id)?;
        Ok(ev)
    }

    /// Loads `expert_id` if needed and returns a lease that keeps it active
    /// until dropped.
    pub fn acquire(&self, expert_id: ExpertId) -> Result<(ActiveLease<'_>, Option<SwapEvent>), ServingError> {
        // Fast path: already active, share the lock with other dispatches.
        {
            let guard = self.state.read();
            if guard.active == Some(expert_id) {
                return Ok((ActiveLease { guard }, None));
            }
        }
        let mut guard = self.state.write();
        let event = guard.ensure_loaded(expert_id, self.clock.as_ref())?;
        if let Some(ev) = event {
            self.record(ev);
        }
        Ok((ActiveLease { guard: RwLockWriteGuard::downgrade(guard) }, event))
    }

    fn record(&self, ev: SwapEvent) {
        self.events.lock().push(ev);
        if let Some(sink) = &self.event_sink {
            let mut w = sink.lock();
            if let Ok(line) = serde_json::to_string(&ev) {
                if writeln!(w, "{line}").and_then(|_| w.flush()).is_err() {
                    log::warn!("failed to append swap event to event log");
                }
            }
        }
    }
}
