//! Service configuration: a TOML file plus environment overrides, and the
//! wiring that turns it into routers, serving state and transports.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use expert_router::adapter::{AdapterManager, ServingMode, ServingState, DEFAULT_SWAP_LATENCY_MS};
use expert_router::clock::{Clock, SimClock, WallClock};
use expert_router::embedder::{Embedder, HashingEmbedder, RemoteEmbedder, DEFAULT_DIM};
use expert_router::executor::{Executor, ExpertTransport, HttpTransport};
use expert_router::registry::{DescriptionStyle, Registry};
use expert_router::router::{LmRouter, Router, SimilarityRouter, Strategy};
use expert_router::router_lm::{FewShotExample, LmClient, PromptTemplate, RemoteLm, RuleBasedLm};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_LISTEN: &str = "EXPERT_ROUTER_LISTEN";
pub const ENV_EMBEDDING: &str = "EXPERT_ROUTER_EMBEDDING";
pub const ENV_LM: &str = "EXPERT_ROUTER_LM";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    #[default]
    Sim,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingConfig {
    pub mode: ServingMode,
    pub backbone_bytes: u64,
    pub memory_budget_bytes: u64,
    pub swap_latency_ms: u64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        ServingConfig {
            mode: ServingMode::DynamicLoad,
            backbone_bytes: 4_000_000_000,
            memory_budget_bytes: 8_000_000_000,
            swap_latency_ms: DEFAULT_SWAP_LATENCY_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// `builtin` or an `http(s)://` URI of an embedding service.
    pub backend: String,
    pub dim: usize,
    pub timeout_ms: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig { backend: "builtin".into(), dim: DEFAULT_DIM, timeout_ms: 30_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    /// Path to a keyword rules file, an `http(s)://` URI of a completion
    /// service, or empty to disable the LM strategy.
    pub backend: String,
    pub prompt_template: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub max_tokens: u32,
    pub timeout_ms: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { backend: String::new(), prompt_template: None, examples: None, max_tokens: 256, timeout_ms: 60_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub strategy: Strategy,
    pub style: DescriptionStyle,
    /// Registry snapshot loaded at startup.
    pub registry: Option<PathBuf>,
    /// Write the registry back to `registry` after each registration.
    pub persist_registry: bool,
    /// Swap events are appended here as JSON lines.
    pub event_log: Option<PathBuf>,
    pub clock: ClockKind,
    pub abstain_margin: f64,
    pub dispatch_timeout_ms: u64,
    pub serving: ServingConfig,
    pub embedding: EmbeddingConfig,
    pub lm: LmConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            strategy: Strategy::EmbeddingSim,
            style: DescriptionStyle::Simple,
            registry: None,
            persist_registry: false,
            event_log: None,
            clock: ClockKind::Sim,
            abstain_margin: 0.0,
            dispatch_timeout_ms: 60_000,
            serving: ServingConfig::default(),
            embedding: EmbeddingConfig::default(),
            lm: LmConfig::default(),
        }
    }
}

fn is_uri(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

impl ServiceConfig {
    /// Parses TOML. Relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ServiceConfig = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: base_dir.to_path_buf(), message: e.to_string() })?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.into(), message },
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.registry);
        fix(&mut self.event_log);
        fix(&mut self.lm.prompt_template);
        fix(&mut self.lm.examples);
        if !self.lm.backend.is_empty() && !is_uri(&self.lm.backend) && Path::new(&self.lm.backend).is_relative() {
            self.lm.backend = base.join(&self.lm.backend).to_string_lossy().into_owned();
        }
    }

    /// Applies `EXPERT_ROUTER_LISTEN`, `EXPERT_ROUTER_EMBEDDING` and
    /// `EXPERT_ROUTER_LM` when set.
    pub fn apply_env(&mut self) {
        self.apply_overrides(|k| std::env::var(k).ok());
    }

    pub fn apply_overrides(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_LISTEN) {
            self.listen = v;
        }
        if let Some(v) = get(ENV_EMBEDDING) {
            self.embedding.backend = v;
        }
        if let Some(v) = get(ENV_LM) {
            self.lm.backend = v;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let must_exist = |what: &str, p: &Option<PathBuf>| match p {
            Some(path) if !path.is_file() => {
                Err(ConfigError::Invalid(format!("{what} {} does not exist", path.display())))
            }
            _ => Ok(()),
        };
        must_exist("registry", &self.registry)?;
        must_exist("lm.prompt_template", &self.lm.prompt_template)?;
        must_exist("lm.examples", &self.lm.examples)?;
        if self.embedding.backend != "builtin" && !is_uri(&self.embedding.backend) {
            return Err(ConfigError::Invalid(format!(
                "embedding.backend must be \"builtin\" or an http(s) URI, got {:?}",
                self.embedding.backend
            )));
        }
        if self.embedding.dim == 0 {
            return Err(ConfigError::Invalid("embedding.dim must be positive".into()));
        }
        if !self.lm.backend.is_empty() && !is_uri(&self.lm.backend) && !Path::new(&self.lm.backend).is_file() {
            return Err(ConfigError::Invalid(format!("lm.backend rules file {} does not exist", self.lm.backend)));
        }
        if self.abstain_margin.is_nan() || self.abstain_margin < 0.0 {
            return Err(ConfigError::Invalid("abstain_margin must be non-negative".into()));
        }
        if self.persist_registry && self.registry.is_none() {
            return Err(ConfigError::Invalid("persist_registry needs a registry path".into()));
        }
        Ok(())
    }
}

/// Everything a running service or CLI command needs.
pub struct Components {
    pub registry: Registry,
    pub executor: Arc<Executor>,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })
}

fn build_embedder(cfg: &EmbeddingConfig) -> Arc<dyn Embedder> {
    if cfg.backend == "builtin" {
        Arc::new(HashingEmbedder::new(cfg.dim))
    } else {
        Arc::new(RemoteEmbedder::new(cfg.backend.clone(), Duration::from_millis(cfg.timeout_ms)))
    }
}

fn build_lm(cfg: &LmConfig) -> Result<Option<LmRouter>, ConfigError> {
    if cfg.backend.is_empty() {
        return Ok(None);
    }
    let client: Arc<dyn LmClient> = if is_uri(&cfg.backend) {
        Arc::new(RemoteLm::new(cfg.backend.clone(), Duration::from_millis(cfg.timeout_ms)))
    } else {
        let path = Path::new(&cfg.backend);
        Arc::new(
            RuleBasedLm::from_json(&read(path)?)
                .map_err(|e| ConfigError::Invalid(format!("rules file {}: {e}", path.display())))?,
        )
    };
    let mut lm = LmRouter::new(client).with_max_tokens(cfg.max_tokens);
    if let Some(p) = &cfg.prompt_template {
        lm = lm.with_template(PromptTemplate::from_file(p).map_err(|e| ConfigError::Invalid(e.to_string()))?);
    }
    if let Some(p) = &cfg.examples {
        let examples: Vec<FewShotExample> = serde_json::from_str(&read(p)?)
            .map_err(|e| ConfigError::Invalid(format!("examples file {}: {e}", p.display())))?;
        lm = lm.with_examples(examples);
    }
    Ok(Some(lm))
}

pub fn build(cfg: &ServiceConfig) -> Result<Components, ConfigError> {
    build_with_transport(cfg, Arc::new(HttpTransport::new(Duration::from_millis(cfg.dispatch_timeout_ms))))
}

pub fn build_with_transport(
    cfg: &ServiceConfig,
    transport: Arc<dyn ExpertTransport>,
) -> Result<Components, ConfigError> {
    cfg.validate()?;
    let registry = match &cfg.registry {
        Some(p) => Registry::from_json(&read(p)?).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?,
        None => Registry::new(),
    };
    let clock: Arc<dyn Clock> = match cfg.clock {
        ClockKind::Sim => Arc::new(SimClock::new()),
        ClockKind::Wall => Arc::new(WallClock::new()),
    };
    let similarity = SimilarityRouter::new(build_embedder(&cfg.embedding)).with_abstain_margin(cfg.abstain_margin);
    let router = Router::new(similarity, build_lm(&cfg.lm)?, clock.clone());

    let sizes: Vec<u64> = registry.experts().iter().map(|e| e.adapter_size_bytes).collect();
    let s = &cfg.serving;
    let state = ServingState::configure(s.mode, s.backbone_bytes, &sizes, s.memory_budget_bytes, s.swap_latency_ms)
        .map_err(|e| ConfigError::Invalid(format!("serving: {e}")))?;
    let mut manager = AdapterManager::new(state, clock);
    if let Some(p) = &cfg.event_log {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        manager = manager.with_event_sink(Box::new(file));
    }
    let executor = Arc::new(Executor::new(router, Arc::new(manager), transport));
    Ok(Components { registry, executor })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let cfg = ServiceConfig::from_toml(
            r#"
listen = "0.0.0.0:9000"
strategy = "prompt_lm"
style = "abstract"
registry = "reg.json"
clock = "wall"

[serving]
mode = "all_in_memory"
backbone_bytes = 1000

[embedding]
backend = "http://localhost:7000/embed"

[lm]
backend = "rules.json"
max_tokens = 32
"#,
            Path::new("/etc/router"),
        )
        .unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.strategy, Strategy::PromptLm);
        assert_eq!(cfg.style, DescriptionStyle::Abstract);
        assert_eq!(cfg.registry.as_deref(), Some(Path::new("/etc/router/reg.json")));
        assert_eq!(cfg.clock, ClockKind::Wall);
        assert_eq!(cfg.serving.mode, ServingMode::AllInMemory);
        assert_eq!(cfg.serving.swap_latency_ms, 9400);
        assert_eq!(cfg.lm.backend, "/etc/router/rules.json");
        assert_eq!(cfg.lm.max_tokens, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ServiceConfig::from_toml("lisen = \"x\"", Path::new(".")).is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = ServiceConfig::default();
        cfg.apply_overrides(|k| match k {
            ENV_LISTEN => Some("127.0.0.1:1".into()),
            ENV_LM => Some("http://lm/complete".into()),
            _ => None,
        });
        assert_eq!(cfg.listen, "127.0.0.1:1");
        assert_eq!(cfg.lm.backend, "http://lm/complete");
        assert_eq!(cfg.embedding.backend, "builtin");
    }

    #[test]
    fn validation() {
        let mut cfg = ServiceConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.embedding.backend = "sentence-transformers".into();
        assert!(cfg.validate().is_err());
        cfg.embedding.backend = "builtin".into();
        cfg.registry = Some("/no/such/registry.json".into());
        assert!(cfg.validate().is_err());
    }
}
