//! Command-line front end. Every command prints JSON; failures print a JSON
//! error object to stderr and map to the exit codes below.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use expert_router::adapter::{amortized_swap_cost, interleaved_schedule, plan_batches, ServingMode};
use expert_router::clock::SimClock;
use expert_router::eval::{run_robustness_eval, run_routing_eval};
use expert_router::executor::{ExecError, TaskInstruction};
use expert_router::ingest::{load_perturbation_pairs, parse_bddl, parse_tasks_jsonl, IngestError};
use expert_router::registry::DescriptionStyle;
use expert_router::router::{RoutingSnapshot, Strategy};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde_json::{json, Value};

use crate::api::{self, AppState};
use crate::config::{self, Components, ConfigError, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "expert-router", version, about = "Route robot task instructions to specialist experts")]
pub struct Cli {
    /// TOML config file. Without one, built-in defaults are used.
    #[arg(long, global = true, env = "EXPERT_ROUTER_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for anything randomized (task shuffling in `eval serving`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Registry file, overriding the config.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Route one instruction without executing it.
    Route {
        #[arg(long)]
        text: String,
        #[command(flatten)]
        routing: RoutingArgs,
    },
    /// Route, swap and dispatch one instruction to its expert.
    Execute {
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "cli-1")]
        task_id: String,
        #[command(flatten)]
        routing: RoutingArgs,
    },
    /// Parse task sources and print the extracted instructions.
    #[command(subcommand)]
    Ingest(IngestCommand),
    /// Offline evaluations.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Clone, Args)]
pub struct RoutingArgs {
    /// embedding | prompt_lm
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// simple | abstract
    #[arg(long)]
    pub style: Option<DescriptionStyle>,
}

#[derive(Debug, Subcommand)]
pub enum IngestCommand {
    /// A tasks.jsonl file.
    Jsonl { file: PathBuf },
    /// One or more .bddl problem files.
    Bddl {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Routing macro-F1 against labeled tasks.
    Route {
        #[arg(long)]
        tasks: PathBuf,
        #[command(flatten)]
        routing: RoutingArgs,
        /// Exit 4 if macro-F1 falls below this.
        #[arg(long)]
        min_f1: Option<f64>,
    },
    /// Macro-F1 on originals vs rephrasings for every strategy and style.
    Robustness {
        #[arg(long)]
        pairs: PathBuf,
        /// Restrict to one strategy.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Restrict to one style.
        #[arg(long)]
        style: Option<DescriptionStyle>,
        /// Exit 4 if any perturbed macro-F1 falls below this.
        #[arg(long)]
        min_f1: Option<f64>,
    },
    /// Swap counts and amortized swap cost, interleaved vs batched by expert.
    Serving {
        #[arg(long)]
        tasks: PathBuf,
        #[command(flatten)]
        routing: RoutingArgs,
        /// all_in_memory | dynamic_load (defaults to the config)
        #[arg(long)]
        mode: Option<ServingMode>,
        /// Adapter already resident before the first task.
        #[arg(long)]
        active: Option<usize>,
        /// Exit 4 if batched amortized swap ms/task exceeds this.
        #[arg(long)]
        max_amortized_ms: Option<f64>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub code: String,
    pub message: String,
    pub extra: Value,
}

impl CliError {
    fn new(exit_code: i32, code: impl Into<String>, message: impl Into<String>) -> Self {
        CliError { exit_code, code: code.into(), message: message.into(), extra: Value::Null }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, "validation", message)
    }

    fn to_json(&self) -> Value {
        let mut err = json!({"code": self.code, "message": self.message});
        if let Value::Object(extra) = &self.extra {
            for (k, v) in extra {
                err[k] = v.clone();
            }
        }
        json!({ "error": err })
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(EXIT_VALIDATION, "config", e.to_string())
    }
}

impl From<ExecError> for CliError {
    fn from(e: ExecError) -> Self {
        let exit = match e {
            ExecError::Validation(_) | ExecError::Serving(_) => EXIT_VALIDATION,
            _ => EXIT_TRANSPORT,
        };
        CliError::new(exit, e.code(), e.to_string())
    }
}

fn ingest_error(file: &Path, e: IngestError) -> CliError {
    let (code, extra) = match &e {
        IngestError::Utf8 { offset } => ("utf8", json!({"offset": offset})),
        IngestError::Json { line, .. } => ("json", json!({"line": line})),
        IngestError::Schema { line, .. } => ("schema", json!({"line": line})),
        IngestError::Sexpr(s) => ("sexpr", json!({"offset": s.offset})),
        IngestError::Extraction => ("extraction", json!({})),
        IngestError::Pairs(_) => ("pairs", json!({})),
    };
    let mut err = CliError::new(EXIT_VALIDATION, code, format!("{}: {e}", file.display()));
    err.extra = extra;
    err.extra["file"] = file.display().to_string().into();
    err
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<ServiceConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env();
    if let Some(r) = &cli.registry {
        cfg.registry = Some(r.clone());
    }
    Ok(cfg)
}

fn setup(cfg: &ServiceConfig) -> Result<(Components, RoutingSnapshot), CliError> {
    let components = config::build(cfg)?;
    let snapshot = components
        .executor
        .router()
        .snapshot(components.registry.clone())
        .map_err(|e| CliError::from(ExecError::from(e)))?;
    Ok((components, snapshot))
}

fn print(out: &mut dyn Write, v: &impl serde::Serialize) -> Result<(), CliError> {
    let text =
        serde_json::to_string_pretty(v).map_err(|e| CliError::new(EXIT_VALIDATION, "internal", e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| CliError::new(EXIT_TRANSPORT, "io", e.to_string()))
}

fn labeled_tasks(path: &Path) -> Result<Vec<TaskInstruction>, CliError> {
    parse_tasks_jsonl(&read_file(path)?).map_err(|e| ingest_error(path, e))
}

fn execute_command(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    let strategy_of = |r: &RoutingArgs| r.strategy.unwrap_or(cfg.strategy);
    let style_of = |r: &RoutingArgs| r.style.unwrap_or(cfg.style);

    match cli.command {
        Command::Serve { listen } => {
            let listen = listen.unwrap_or_else(|| cfg.listen.clone());
            let components = config::build(&cfg)?;
            let state = AppState::new(components, &cfg).map_err(|e| CliError::from(ExecError::from(e)))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new(EXIT_TRANSPORT, "io", e.to_string()))?;
            rt.block_on(api::serve(Arc::new(state), &listen))
                .map_err(|e| CliError::new(EXIT_TRANSPORT, "io", format!("{listen}: {e}")))
        }
        Command::Route { text, routing } => {
            let (c, snap) = setup(&cfg)?;
            let decision = c
                .executor
                .router()
                .route(&snap, &text, strategy_of(&routing), style_of(&routing))
                .map_err(|e| CliError::from(ExecError::from(e)))?;
            print(out, &decision)
        }
        Command::Execute { text, task_id, routing } => {
            let (c, snap) = setup(&cfg)?;
            let task = TaskInstruction::new(task_id, text);
            let result = c.executor.execute(&snap, &task, strategy_of(&routing), style_of(&routing))?;
            print(out, &result)
        }
        Command::Ingest(IngestCommand::Jsonl { file }) => {
            let tasks = labeled_tasks(&file)?;
            print(out, &json!({ "tasks": tasks }))
        }
        Command::Ingest(IngestCommand::Bddl { files }) => {
            let mut tasks = Vec::new();
            for file in &files {
                let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                tasks.push(parse_bddl(&read_file(file)?, &stem).map_err(|e| ingest_error(file, e))?);
            }
            print(out, &json!({ "tasks": tasks }))
        }
        Command::Eval(EvalCommand::Route { tasks, routing, min_f1 }) => {
            let (c, snap) = setup(&cfg)?;
            let tasks = labeled_tasks(&tasks)?;
            let report =
                run_routing_eval(c.executor.router(), &snap, &tasks, strategy_of(&routing), style_of(&routing))
                    .map_err(|e| CliError::validation(e.to_string()))?;
            print(out, &report)?;
            match min_f1 {
                Some(min) if report.macro_f1 < min => Err(CliError::new(
                    EXIT_THRESHOLD,
                    "threshold",
                    format!("macro-F1 {:.4} below {min}", report.macro_f1),
                )),
                _ => Ok(()),
            }
        }
        Command::Eval(EvalCommand::Robustness { pairs, strategy, style, min_f1 }) => {
            let (c, snap) = setup(&cfg)?;
            let pairs = load_perturbation_pairs(&read_file(&pairs)?).map_err(|e| ingest_error(&pairs, e))?;
            let strategies: Vec<Strategy> = match strategy {
                Some(s) => vec![s],
                None if cfg.lm.backend.is_empty() => vec![Strategy::EmbeddingSim],
                None => Strategy::ALL.to_vec(),
            };
            let styles: Vec<DescriptionStyle> = style.map_or(DescriptionStyle::ALL.to_vec(), |s| vec![s]);
            let report = run_robustness_eval(c.executor.router(), &snap, &pairs, &strategies, &styles)
                .map_err(|e| CliError::validation(e.to_string()))?;
            print(out, &report)?;
            if let Some(min) = min_f1 {
                if let Some(worst) = report.conditions.iter().find(|c| c.perturbed.macro_f1 < min) {
                    return Err(CliError::new(
                        EXIT_THRESHOLD,
                        "threshold",
                        format!(
                            "{}/{} perturbed macro-F1 {:.4} below {min}",
                            worst.strategy.as_str(),
                            worst.style.as_str(),
                            worst.perturbed.macro_f1
                        ),
                    ));
                }
            }
            Ok(())
        }
        Command::Eval(EvalCommand::Serving { tasks, routing, mode, active, max_amortized_ms }) => {
            let mut cfg = cfg.clone();
            if let Some(m) = mode {
                cfg.serving.mode = m;
            }
            let (c, snap) = setup(&cfg)?;
            let mut tasks = labeled_tasks(&tasks)?;
            if tasks.is_empty() {
                return Err(CliError::validation("no tasks"));
            }
            if let Some(seed) = cli.seed {
                tasks.shuffle(&mut StdRng::seed_from_u64(seed));
            }
            let mut assignments = Vec::with_capacity(tasks.len());
            for t in &tasks {
                let d = c
                    .executor
                    .router()
                    .route(&snap, &t.text, strategy_of(&routing), style_of(&routing))
                    .map_err(|e| CliError::from(ExecError::from(e)))?;
                assignments.push((t.task_id.clone(), d.expert_id));
            }
            let mut state = c.executor.manager().snapshot();
            if let Some(id) = active {
                state.ensure_loaded(id, &SimClock::new()).map_err(|e| CliError::validation(e.to_string()))?;
            }
            let interleaved = interleaved_schedule(&assignments);
            let batched = plan_batches(&assignments);
            let cost = |s: &[(usize, Vec<String>)]| -> Result<Value, CliError> {
                let swaps = state.swaps_for(s.iter().map(|(e, _)| *e));
                let amortized = amortized_swap_cost(s, &state).map_err(|e| CliError::validation(e.to_string()))?;
                Ok(json!({
                    "swaps": swaps,
                    "swap_ms": swaps * state.swap_latency_ms,
                    "amortized_swap_ms_per_task": amortized,
                }))
            };
            let report = json!({
                "mode": state.mode,
                "n_tasks": tasks.len(),
                "seed": cli.seed,
                "memory_used_bytes": state.memory_used(),
                "memory_budget_bytes": state.memory_budget_bytes,
                "order": assignments.iter().map(|(t, e)| json!({"task_id": t, "expert_id": e})).collect::<Vec<_>>(),
                "interleaved": cost(&interleaved)?,
                "batched": cost(&batched)?,
            });
            print(out, &report)?;
            let batched_ms = report["batched"]["amortized_swap_ms_per_task"].as_f64().unwrap_or(0.0);
            match max_amortized_ms {
                Some(max) if batched_ms > max => Err(CliError::new(
                    EXIT_THRESHOLD,
                    "threshold",
                    format!("batched amortized swap cost {batched_ms} ms/task above {max}"),
                )),
                _ => Ok(()),
            }
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match execute_command(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json());
            e.exit_code
        }
    }
}
