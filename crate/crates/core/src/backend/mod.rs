//! Language-model backends: text in, next-token log-probabilities out.
//!
//! Token identifiers are the backend's literal token strings. The decoder
//! appends them to the running context verbatim and never re-tokenizes.

mod bigram;
mod remote;
mod replay;
mod table;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distributions::{DistError, LogProbDist};
use crate::scalar::Scalar;

pub use bigram::{fit_bigram, BigramBackend};
pub use remote::{
    parse_health, parse_next_token_response, select_backend_url, Health, RemoteBackend,
    RemoteOptions, WireEntry, WireRequest, WireResponse, BACKEND_URL_ENV, DEFAULT_MAX_IN_FLIGHT,
    DEFAULT_TIMEOUT_SECS, DEFAULT_TOP_K,
};
pub use replay::ReplayBackend;
pub use table::{build_toy_table, TableBackend, TableFile, TableRule, TableRuleSpec};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("request for context {context_hash} timed out")]
    Timeout { context_hash: String },
    #[error("backend unreachable for context {context_hash}: {reason}")]
    Unreachable {
        context_hash: String,
        reason: String,
    },
    #[error("backend returned HTTP {status} for context {context_hash}: {body}")]
    Status {
        status: u16,
        context_hash: String,
        body: String,
    },
    #[error("malformed backend response for context {context_hash}: {reason}")]
    Malformed {
        context_hash: String,
        reason: String,
    },
    #[error("no recorded distribution for context {context_hash}")]
    ReplayMiss { context_hash: String },
    #[error("context is empty")]
    EmptyContext,
}

impl BackendError {
    /// Connection-level failures, as opposed to bad data or configuration.
    pub fn is_unreachable(&self) -> bool {
        matches!(self, Self::Timeout { .. } | Self::Unreachable { .. })
    }
}

/// Short stable identifier for a context, used for caching and replay diagnostics.
pub fn context_hash(context: &str) -> String {
    let digest = Sha256::digest(context.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// A language model that scores the next token after a text context.
///
/// Implementations are shared across evaluation workers.
pub trait Backend<F: Scalar>: Send + Sync {
    fn next_token_logprobs(&self, context: &str) -> Result<LogProbDist<F>, BackendError>;

    /// Token string that ends generation, if the backend has one.
    fn eos_token(&self) -> Option<String> {
        None
    }

    fn describe(&self) -> String;
}

impl<F: Scalar, B: Backend<F> + ?Sized> Backend<F> for &B {
    fn next_token_logprobs(&self, context: &str) -> Result<LogProbDist<F>, BackendError> {
        (**self).next_token_logprobs(context)
    }
    fn eos_token(&self) -> Option<String> {
        (**self).eos_token()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<F: Scalar, B: Backend<F> + ?Sized> Backend<F> for Box<B> {
    fn next_token_logprobs(&self, context: &str) -> Result<LogProbDist<F>, BackendError> {
        (**self).next_token_logprobs(context)
    }
    fn eos_token(&self) -> Option<String> {
        (**self).eos_token()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// One timed backend query.
#[derive(Debug, Clone)]
pub struct GenerationStep<F> {
    pub context: String,
    pub dist: LogProbDist<F>,
    pub latency: Duration,
}

pub fn timed_step<F: Scalar, B: Backend<F> + ?Sized>(
    backend: &B,
    context: &str,
) -> Result<GenerationStep<F>, BackendError> {
    let start = Instant::now();
    let dist = backend.next_token_logprobs(context)?;
    Ok(GenerationStep {
        context: context.to_owned(),
        dist,
        latency: start.elapsed(),
    })
}

/// Which backend to construct.
///
/// Parsed from `table:PATH`, `bigram:PATH` or `remote:URL`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    /// Suffix-rule table in JSON.
    Table { path: PathBuf },
    /// Bigram model fitted on a whitespace-tokenized text corpus.
    Bigram { path: PathBuf, smoothing: f64 },
    /// HTTP server speaking the next-token wire protocol.
    Remote {
        endpoint: String,
        options: RemoteOptions,
    },
}

impl FromStr for BackendDescriptor {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, target) = s.split_once(':').ok_or_else(|| {
            BackendError::Config(format!(
                "backend {s:?} must look like table:PATH, bigram:PATH or remote:URL"
            ))
        })?;
        if target.is_empty() {
            return Err(BackendError::Config(format!("backend {s:?} has no target")));
        }
        match kind {
            "table" => Ok(Self::Table {
                path: target.into(),
            }),
            "bigram" => Ok(Self::Bigram {
                path: target.into(),
                smoothing: 0.0,
            }),
            "remote" => Ok(Self::Remote {
                endpoint: target.to_owned(),
                options: RemoteOptions::default(),
            }),
            other => Err(BackendError::Config(format!(
                "unknown backend kind {other:?}"
            ))),
        }
    }
}

impl fmt::Display for BackendDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Table { path } => write!(f, "table:{}", path.display()),
            Self::Bigram { path, .. } => write!(f, "bigram:{}", path.display()),
            Self::Remote { endpoint, .. } => write!(f, "remote:{endpoint}"),
        }
    }
}

impl BackendDescriptor {
    /// Builds the backend. Remote endpoints honour `CED_BACKEND_URL`.
    pub fn open<F: Scalar>(&self) -> Result<Box<dyn Backend<F>>, BackendError> {
        match self {
            Self::Table { path } => Ok(Box::new(TableBackend::<F>::load(path)?)),
            Self::Bigram { path, smoothing } => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    BackendError::Config(format!("cannot read corpus {}: {e}", path.display()))
                })?;
                Ok(Box::new(BigramBackend::<F>::from_text(&text, *smoothing)?))
            }
            Self::Remote { endpoint, options } => {
                let endpoint = select_backend_url(endpoint);
                Ok(Box::new(RemoteBackend::<F>::new(
                    &endpoint,
                    options.clone(),
                )?))
            }
        }
    }
}

impl From<DistError> for BackendError {
    fn from(e: DistError) -> Self {
        BackendError::Config(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_parsing() {
        assert_eq!(
            "table:fx/t.json".parse::<BackendDescriptor>().unwrap(),
            BackendDescriptor::Table {
                path: "fx/t.json".into()
            }
        );
        let remote: BackendDescriptor = "remote:http://127.0.0.1:8080".parse().unwrap();
        assert_eq!(remote.to_string(), "remote:http://127.0.0.1:8080");
        assert!("gpt".parse::<BackendDescriptor>().is_err());
        assert!("table:".parse::<BackendDescriptor>().is_err());
        assert!("onnx:model".parse::<BackendDescriptor>().is_err());
    }

    #[test]
    fn hashes_are_stable() {
        assert_eq!(context_hash("abc"), context_hash("abc"));
        assert_ne!(context_hash("abc"), context_hash("abd"));
        assert_eq!(context_hash("").len(), 16);
    }
}
