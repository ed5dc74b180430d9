//! Routing-quality and serving-cost evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{ServingMode, ServingState};
use crate::executor::{ExecutionResult, OutcomeStatus, TaskInstruction};
use crate::ingest::PerturbationPair;
use crate::registry::DescriptionStyle;
use crate::router::{Router, RoutingSnapshot, Strategy};

pub const UNROUTED: &str = "unrouted";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("evaluation input invalid: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicted {
    Label(String),
    /// Abstention or routing failure.
    Unrouted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// Rows are truth classes; columns are predicted classes followed by `unrouted`.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub n_tasks: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 and their unweighted mean over `classes`.
/// Classes with no support or no predictions contribute F1 = 0.
pub fn macro_f1(predictions: &[(String, Predicted)], classes: &[String]) -> Result<EvalReport, EvalError> {
    let k = classes.len();
    let index = |label: &str| classes.iter().position(|c| c == label);
    let mut confusion = vec![vec![0u64; k + 1]; k];
    for (truth, pred) in predictions {
        let t = index(truth).ok_or_else(|| EvalError::Validation(format!("unknown truth label {truth:?}")))?;
        let p = match pred {
            Predicted::Label(l) => {
                index(l).ok_or_else(|| EvalError::Validation(format!("unknown predicted label {l:?}")))?
            }
            Predicted::Unrouted => k,
        };
        confusion[t][p] += 1;
    }
    Ok(report_from_confusion(classes, confusion))
}

/// Metrics from a confusion matrix laid out as in [`EvalReport::confusion`].
pub fn report_from_confusion(classes: &[String], confusion: Vec<Vec<u64>>) -> EvalReport {
    let k = classes.len();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let support: u64 = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { label: classes[c].clone(), precision, recall, f1, support }
        })
        .collect();
    let macro_f1 = if k == 0 { 0.0 } else { per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64 };
    let n_tasks = confusion.iter().flatten().sum();
    EvalReport { classes: classes.to_vec(), confusion, per_class, macro_f1, n_tasks }
}

fn pooled(reports: impl Iterator<Item = EvalReport>, classes: &[String]) -> EvalReport {
    let mut total = vec![vec![0u64; classes.len() + 1]; classes.len()];
    for r in reports {
        for (row, add) in total.iter_mut().zip(&r.confusion) {
            for (cell, v) in row.iter_mut().zip(add) {
                *cell += v;
            }
        }
    }
    report_from_confusion(classes, total)
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let w = self.classes.iter().map(String::len).chain([UNROUTED.len(), 9]).max().unwrap_or(9) + 2;
        let mut out = String::new();
        let _ = writeln!(out, "{:<w$}{:>10}{:>10}{:>10}{:>10}", "class", "precision", "recall", "f1", "support");
        for m in &self.per_class {
            let _ =
                writeln!(out, "{:<w$}{:>10.4}{:>10.4}{:>10.4}{:>10}", m.label, m.precision, m.recall, m.f1, m.support);
        }
        let _ = writeln!(out, "{:<w$}{:>30.4}{:>10}", "macro", self.macro_f1, self.n_tasks);
        let _ = writeln!(out);
        let _ = write!(out, "{:<w$}", "truth \\ pred");
        for c in self.classes.iter().map(String::as_str).chain([UNROUTED]) {
            let _ = write!(out, "{c:>w$}");
        }
        let _ = writeln!(out);
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            let _ = write!(out, "{c:<w$}");
            for n in row {
                let _ = write!(out, "{n:>w$}");
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// Category labels of the registry in id order, then any extra truth labels.
fn class_set(snapshot: &RoutingSnapshot, tasks: &[&TaskInstruction]) -> Vec<String> {
    let mut classes: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    let labels = snapshot
        .registry()
        .experts()
        .iter()
        .map(|e| e.category_label.as_str())
        .chain(tasks.iter().filter_map(|t| t.truth_label.as_deref()));
    for l in labels {
        if seen.insert(l) {
            classes.push(l.to_string());
        }
    }
    classes
}

fn predict(
    router: &Router,
    snapshot: &RoutingSnapshot,
    text: &str,
    strategy: Strategy,
    style: DescriptionStyle,
) -> Predicted {
    match router.route(snapshot, text, strategy, style) {
        Ok(d) if !d.abstained => snapshot
            .registry()
            .get(d.expert_id)
            .map(|e| Predicted::Label(e.category_label.clone()))
            .unwrap_or(Predicted::Unrouted),
        _ => Predicted::Unrouted,
    }
}

fn eval_with_classes(
    router: &Router,
    snapshot: &RoutingSnapshot,
    tasks: &[&TaskInstruction],
    strategy: Strategy,
    style: DescriptionStyle,
    classes: &[String],
) -> Result<EvalReport, EvalError> {
    let preds = tasks
        .iter()
        .map(|t| {
            let truth = t
                .truth_label
                .clone()
                .ok_or_else(|| EvalError::Validation(format!("task {} has no truth label", t.task_id)))?;
            Ok((truth, predict(router, snapshot, &t.text, strategy, style)))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    macro_f1(&preds, classes)
}

/// Routes every task (no dispatch) and scores the chosen experts' categories.
pub fn run_routing_eval(
    router: &Router,
    snapshot: &RoutingSnapshot,
    tasks: &[TaskInstruction],
    strategy: Strategy,
    style: DescriptionStyle,
) -> Result<EvalReport, EvalError> {
    let refs: Vec<&TaskInstruction> = tasks.iter().collect();
    if let Some(t) = tasks.iter().find(|t| t.truth_label.is_none()) {
        return Err(EvalError::Validation(format!("task {} has no truth label", t.task_id)));
    }
    let classes = class_set(snapshot, &refs);
    eval_with_classes(router, snapshot, &refs, strategy, style, &classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCondition {
    pub strategy: Strategy,
    pub style: DescriptionStyle,
    pub original: EvalReport,
    pub perturbed: EvalReport,
    /// perturbed - original
    pub delta_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub conditions: Vec<RobustnessCondition>,
    pub n_pairs: u64,
    pub n_rephrasings: u64,
    /// Mean macro-F1 over conditions.
    pub mean_original_macro_f1: f64,
    pub mean_perturbed_macro_f1: f64,
    /// Macro-F1 of the confusion matrices summed over conditions.
    pub pooled_original_macro_f1: f64,
    pub pooled_perturbed_macro_f1: f64,
}

impl RobustnessReport {
    pub fn condition(&self, strategy: Strategy, style: DescriptionStyle) -> Option<&RobustnessCondition> {
        self.conditions.iter().find(|c| c.strategy == strategy && c.style == style)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12}{:<10}{:>10}{:>11}{:>10}", "strategy", "style", "original", "perturbed", "delta");
        for c in &self.conditions {
            let _ = writeln!(
                out,
                "{:<12}{:<10}{:>10.4}{:>11.4}{:>+10.4}",
                c.strategy.as_str(),
                c.style.as_str(),
                c.original.macro_f1,
                c.perturbed.macro_f1,
                c.delta_macro_f1
            );
        }
        let _ = writeln!(
            out,
            "{:<22}{:>10.4}{:>11.4}{:>+10.4}",
            "mean",
            self.mean_original_macro_f1,
            self.mean_perturbed_macro_f1,
            self.mean_perturbed_macro_f1 - self.mean_original_macro_f1
        );
        let _ = writeln!(
            out,
            "{:<22}{:>10.4}{:>11.4}{:>+10.4}",
            "pooled",
            self.pooled_original_macro_f1,
            self.pooled_perturbed_macro_f1,
            self.pooled_perturbed_macro_f1 - self.pooled_original_macro_f1
        );
        out
    }
}

/// Evaluates every (strategy, style) on the originals and on all rephrasings.
pub fn run_robustness_eval(
    router: &Router,
    snapshot: &RoutingSnapshot,
    pairs: &[PerturbationPair],
    strategies: &[Strategy],
    styles: &[DescriptionStyle],
) -> Result<RobustnessReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Validation("no perturbation pairs".into()));
    }
    let originals: Vec<&TaskInstruction> = pairs.iter().map(|p| &p.original).collect();
    let rephrasings: Vec<TaskInstruction> = pairs.iter().flat_map(PerturbationPair::rephrasings).collect();
    let rephrased_refs: Vec<&TaskInstruction> = rephrasings.iter().collect();
    let all: Vec<&TaskInstruction> = originals.iter().chain(&rephrased_refs).copied().collect();
    let classes = class_set(snapshot, &all);

    let mut conditions = Vec::new();
    for &strategy in strategies {
        for &style in styles {
            let original = eval_with_classes(router, snapshot, &originals, strategy, style, &classes)?;
            let perturbed = eval_with_classes(router, snapshot, &rephrased_refs, strategy, style, &classes)?;
            conditions.push(RobustnessCondition {
                strategy,
                style,
                delta_macro_f1: perturbed.macro_f1 - original.macro_f1,
                original,
                perturbed,
            });
        }
    }
    let mean = |f: fn(&RobustnessCondition) -> f64| {
        if conditions.is_empty() {
            0.0
        } else {
            conditions.iter().map(f).sum::<f64>() / conditions.len() as f64
        }
    };
    Ok(RobustnessReport {
        mean_original_macro_f1: mean(|c| c.original.macro_f1),
        mean_perturbed_macro_f1: mean(|c| c.perturbed.macro_f1),
        pooled_original_macro_f1: pooled(conditions.iter().map(|c| c.original.clone()), &classes).macro_f1,
        pooled_perturbed_macro_f1: pooled(conditions.iter().map(|c| c.perturbed.clone()), &classes).macro_f1,
        n_pairs: pairs.len() as u64,
        n_rephrasings: rephrasings.len() as u64,
        conditions,
    })
}

/// Downstream outcome aggregate over executed tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub n_tasks: u64,
    pub success_rate: f64,
    pub mean_metric: f64,
}

impl OutcomeSummary {
    pub fn from_results(results: &[ExecutionResult]) -> Self {
        let n = results.len() as u64;
        let ok = results.iter().filter(|r| r.outcome.status == OutcomeStatus::Success).count() as u64;
        let mean_metric =
            if n == 0 { 0.0 } else { results.iter().map(|r| r.outcome.metric_value).sum::<f64>() / n as f64 };
        OutcomeSummary { n_tasks: n, success_rate: ratio(ok, n), mean_metric }
    }

    /// `self - baseline` for success rate and mean metric.
    pub fn delta_from(&self, baseline: &OutcomeSummary) -> (f64, f64) {
        (self.success_rate - baseline.success_rate, self.mean_metric - baseline.mean_metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingReport {
    pub mode: ServingMode,
    pub n_tasks: u64,
    pub swap_count: u64,
    pub total_swap_ms: u64,
    pub amortized_swap_ms_per_task: f64,
    pub peak_memory_bytes: u64,
    pub memory_used_bytes: u64,
}

/// Swap totals over `results` plus the memory figures of `state`.
pub fn serving_report(results: &[ExecutionResult], state: &ServingState) -> ServingReport {
    let swaps: Vec<_> = results.iter().filter_map(|r| r.swap).collect();
    let total_swap_ms: u64 = swaps.iter().map(|s| s.duration_ms).sum();
    ServingReport {
        mode: state.mode,
        n_tasks: results.len() as u64,
        swap_count: swaps.len() as u64,
        total_swap_ms,
        amortized_swap_ms_per_task: ratio(total_swap_ms, results.len() as u64),
        peak_memory_bytes: state.peak_memory_bytes,
        memory_used_bytes: state.memory_used(),
    }
}
