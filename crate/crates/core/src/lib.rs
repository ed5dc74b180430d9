//! Routes textual task instructions to specialist experts and manages how those
//! experts are served.
//!
//! Two zero-shot routing strategies are provided: cosine similarity between
//! the task embedding and each expert's meta-description embedding
//! ([`router::SimilarityRouter`]), and prompting a language model with the
//! expert catalog and few-shot examples ([`router::LmRouter`]). The
//! [`executor::Executor`] runs the full loop: route, make the expert's adapter
//! active under the configured [`adapter::ServingMode`], dispatch over HTTP.

pub mod adapter;
pub mod clock;
pub mod embedder;
pub mod eval;
pub mod executor;
pub mod ingest;
pub mod registry;
pub mod router;
pub mod router_lm;
pub mod sexpr;

pub use adapter::{AdapterManager, ServingMode, ServingState, SwapEvent};
pub use clock::{Clock, SimClock, WallClock};
pub use embedder::{Embedder, Embedding, EmbeddingCache, HashingEmbedder};
pub use executor::{ExecError, ExecutionResult, Executor, TaskInstruction};
pub use registry::{DescriptionStyle, ExpertId, ExpertProfile, NewExpert, Registry};
pub use router::{Router, RoutingDecision, RoutingSnapshot, Strategy};
