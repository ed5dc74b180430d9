//! Routing strategies and the decision record they produce.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::embedder::{cosine, normalize, EmbedError, Embedder, Embedding, EmbeddingCache};
use crate::registry::{DescriptionStyle, ExpertId, Registry, RegistryError};
use crate::router_lm::{
    build_prompt, parse_expert_index, FewShotExample, LmClient, LmError, LmRequest, PromptError, PromptTemplate,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "embedding")]
    EmbeddingSim,
    #[serde(rename = "prompt_lm")]
    PromptLm,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::EmbeddingSim, Strategy::PromptLm];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::EmbeddingSim => "embedding",
            Strategy::PromptLm => "prompt_lm",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "embedding" | "embedding_sim" | "similarity" => Ok(Strategy::EmbeddingSim),
            "lm" | "prompt_lm" | "prompt" => Ok(Strategy::PromptLm),
            other => Err(format!("unknown routing strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertScore {
    pub expert_id: ExpertId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub expert_id: ExpertId,
    pub scores: Vec<ExpertScore>,
    pub strategy: Strategy,
    pub style: DescriptionStyle,
    pub elapsed_ms: u64,
    pub abstained: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum RouteError {
    #[error("expert pool is empty")]
    EmptyPool,
    #[error("invalid routing input: {0}")]
    Validation(String),
    #[error("embedding cache does not match the current {0} catalog")]
    CacheInvalid(DescriptionStyle),
    #[error("routing transport error: {0}")]
    Transport(String),
    #[error("routing failed: {0}")]
    Failed(String),
    #[error("no LM backend configured")]
    LmUnavailable,
    #[error(transparent)]
    Embed(EmbedError),
}

impl From<EmbedError> for RouteError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::EmptyPool => RouteError::EmptyPool,
            EmbedError::Transport(m) => RouteError::Transport(m),
            other => RouteError::Embed(other),
        }
    }
}

impl From<PromptError> for RouteError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::EmptyPool => RouteError::EmptyPool,
            other => RouteError::Validation(other.to_string()),
        }
    }
}

/// Scores closer than this are treated as equal. Mathematically tied cosines
/// can come out a few ulps apart after normalization.
pub const TIE_EPSILON: f64 = 1e-12;

/// Cosine of `task` against every cached meta embedding, in id order, and the
/// first id carrying the maximal score (within [`TIE_EPSILON`]).
pub fn rank_by_cosine(task: &Embedding, cache: &EmbeddingCache) -> Result<(ExpertId, Vec<ExpertScore>), RouteError> {
    let mut scores = Vec::with_capacity(cache.entries.len());
    let mut best: Option<ExpertScore> = None;
    for (&expert_id, meta) in &cache.entries {
        let s = ExpertScore { expert_id, score: cosine(task, meta)? };
        if best.is_none_or(|b| s.score > b.score + TIE_EPSILON) {
            best = Some(s);
        }
        scores.push(s);
    }
    let best = best.ok_or(RouteError::EmptyPool)?;
    Ok((best.expert_id, scores))
}

fn top_two_gap(scores: &[ExpertScore]) -> Option<f64> {
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.score).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    (sorted.len() >= 2).then(|| sorted[0] - sorted[1])
}

/// `argmax_i cos(E(task), E(meta_i))`, ties to the lowest id.
#[derive(Clone)]
pub struct SimilarityRouter {
    embedder: Arc<dyn Embedder>,
    /// 0 disables abstention.
    abstain_margin: f64,
}

impl SimilarityRouter {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        SimilarityRouter { embedder, abstain_margin: 0.0 }
    }

    pub fn with_abstain_margin(mut self, margin: f64) -> Self {
        self.abstain_margin = margin.max(0.0);
        self
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn route(
        &self,
        registry: &Registry,
        cache: &EmbeddingCache,
        task_text: &str,
        style: DescriptionStyle,
        clock: &dyn Clock,
    ) -> Result<RoutingDecision, RouteError> {
        let start = clock.now_ms();
        let catalog = registry.catalog(style).map_err(|_| RouteError::EmptyPool)?;
        if cache.style != style || !cache.is_valid_for(&catalog) {
            return Err(RouteError::CacheInvalid(style));
        }
        if normalize(task_text).is_empty() {
            return Err(RouteError::Validation("task text is empty after normalization".into()));
        }
        let task = self.embedder.embed(task_text)?;
        let (expert_id, scores) = rank_by_cosine(&task, cache)?;
        let abstained = self.abstain_margin > 0.0 && top_two_gap(&scores).is_some_and(|gap| gap < self.abstain_margin);
        Ok(RoutingDecision {
            expert_id,
            scores,
            strategy: Strategy::EmbeddingSim,
            style,
            elapsed_ms: clock.now_ms().saturating_sub(start),
            abstained,
        })
    }
}

/// Asks an LM to name the expert, retrying once on an unparsable answer.
#[derive(Clone)]
pub struct LmRouter {
    client: Arc<dyn LmClient>,
    template: PromptTemplate,
    examples: Vec<FewShotExample>,
    max_tokens: u32,
}

impl LmRouter {
    pub fn new(client: Arc<dyn LmClient>) -> Self {
        LmRouter { client, template: PromptTemplate::default(), examples: Vec::new(), max_tokens: 256 }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_examples(mut self, examples: Vec<FewShotExample>) -> Self {
        self.examples = examples;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn prompt_for(
        &self,
        registry: &Registry,
        task_text: &str,
        style: DescriptionStyle,
    ) -> Result<String, RouteError> {
        let catalog = registry.catalog(style).map_err(|_| RouteError::EmptyPool)?;
        Ok(build_prompt(&self.template, task_text, &catalog, &self.examples)?)
    }

    pub fn route(
        &self,
        registry: &Registry,
        task_text: &str,
        style: DescriptionStyle,
        clock: &dyn Clock,
    ) -> Result<RoutingDecision, RouteError> {
        let start = clock.now_ms();
        if normalize(task_text).is_empty() {
            return Err(RouteError::Validation("task text is empty after normalization".into()));
        }
        let prompt = self.prompt_for(registry, task_text, style)?;
        let k = registry.len();
        let request = LmRequest::new(prompt, self.max_tokens);

        let mut last = None;
        for _ in 0..2 {
            let response = self.client.complete(&request).map_err(|e| match e {
                LmError::Transport(m) | LmError::Protocol(m) => RouteError::Transport(m),
            })?;
            match parse_expert_index(&response.text, k) {
                Ok(expert_id) => {
                    return Ok(RoutingDecision {
                        expert_id,
                        scores: (0..k)
                            .map(|i| ExpertScore { expert_id: i, score: if i == expert_id { 1.0 } else { 0.0 } })
                            .collect(),
                        strategy: Strategy::PromptLm,
                        style,
                        elapsed_ms: clock.now_ms().saturating_sub(start),
                        abstained: false,
                    })
                }
                Err(e) => last = Some(e),
            }
        }
        Err(RouteError::Failed(last.map(|e| e.to_string()).unwrap_or_default()))
    }
}

/// A registry together with meta-description caches for both styles.
#[derive(Debug, Clone)]
pub struct RoutingSnapshot {
    registry: Registry,
    caches: HashMap<DescriptionStyle, EmbeddingCache>,
}

impl RoutingSnapshot {
    pub fn build(registry: Registry, embedder: &dyn Embedder) -> Result<Self, RouteError> {
        let mut caches = HashMap::new();
        if !registry.is_empty() {
            for style in DescriptionStyle::ALL {
                let catalog = registry.catalog(style).map_err(|_| RouteError::EmptyPool)?;
                caches.insert(style, EmbeddingCache::build(&catalog, embedder)?);
            }
        }
        Ok(RoutingSnapshot { registry, caches })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn cache(&self, style: DescriptionStyle) -> Option<&EmbeddingCache> {
        self.caches.get(&style)
    }
}

/// Dispatches to the configured strategy.
#[derive(Clone)]
pub struct Router {
    similarity: SimilarityRouter,
    lm: Option<LmRouter>,
    clock: Arc<dyn Clock>,
}

impl Router {
    pub fn new(similarity: SimilarityRouter, lm: Option<LmRouter>, clock: Arc<dyn Clock>) -> Self {
        Router { similarity, lm, clock }
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        self.similarity.embedder()
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn snapshot(&self, registry: Registry) -> Result<RoutingSnapshot, RouteError> {
        RoutingSnapshot::build(registry, self.similarity.embedder().as_ref())
    }

    pub fn route(
        &self,
        snapshot: &RoutingSnapshot,
        task_text: &str,
        strategy: Strategy,
        style: DescriptionStyle,
    ) -> Result<RoutingDecision, RouteError> {
        if snapshot.registry.is_empty() {
            return Err(RouteError::EmptyPool);
        }
        match strategy {
            Strategy::EmbeddingSim => {
                let cache = snapshot.cache(style).ok_or(RouteError::CacheInvalid(style))?;
                self.similarity.route(&snapshot.registry, cache, task_text, style, self.clock.as_ref())
            }
            Strategy::PromptLm => {
                let lm = self.lm.as_ref().ok_or(RouteError::LmUnavailable)?;
                lm.route(&snapshot.registry, task_text, style, self.clock.as_ref())
            }
        }
    }
}

impl From<RegistryError> for RouteError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::EmptyPool => RouteError::EmptyPool,
            other => RouteError::Validation(other.to_string()),
        }
    }
}
