use std::collections::{BTreeMap, HashMap};
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{context_hash, Backend, BackendError};
use crate::distributions::LogProbDist;
use crate::scalar::Scalar;

/// Overrides the configured endpoint of a remote backend.
pub const BACKEND_URL_ENV: &str = "CED_BACKEND_URL";
pub const DEFAULT_TOP_K: usize = 20;
/// `CED_BACKEND_URL` when set and non-blank, otherwise `configured`.
pub fn select_backend_url(configured: &str) -> String {
    std::env::var(BACKEND_URL_ENV)
        .ok()
        .filter(|v| !v.trim().is_empty())
        .unwrap_or_else(|| configured.to_owned())
}

pub const DEFAULT_TIMEOUT_SECS: f64 = 30.0;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteOptions {
    pub top_k: usize,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

/// Body of `POST /v1/next_token_logprobs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest {
    pub context: String,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEntry {
    pub token: String,
    pub logprob: f64,
}

/// Response of `POST /v1/next_token_logprobs`. `eos` is optional metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub model: String,
    pub entries: Vec<WireEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model: String,
}

/// Parses and checks a next-token response body.
///
/// Entries must be non-empty, at most `top_k` long, sorted by descending
/// log-probability, free of duplicate tokens, and hold finite values <= 0.
pub fn parse_next_token_response<F: Scalar>(
    body: &str,
    top_k: usize,
    context_hash: &str,
) -> Result<(LogProbDist<F>, WireResponse), BackendError> {
    let malformed = |reason: String| BackendError::Malformed {
        context_hash: context_hash.to_owned(),
        reason,
    };
    let response: WireResponse =
        serde_json::from_str(body).map_err(|e| malformed(e.to_string()))?;
    if response.entries.is_empty() {
        return Err(malformed("no entries".into()));
    }
    if response.entries.len() > top_k {
        return Err(malformed(format!(
            "{} entries exceed top_k {top_k}",
            response.entries.len()
        )));
    }
    if response
        .entries
        .windows(2)
        .any(|w| w[1].logprob > w[0].logprob)
    {
        return Err(malformed(
            "entries are not sorted by descending logprob".into(),
        ));
    }
    let mut entries = BTreeMap::new();
    for entry in &response.entries {
        if entries
            .insert(entry.token.clone(), F::of(entry.logprob))
            .is_some()
        {
            return Err(malformed(format!("duplicate token {:?}", entry.token)));
        }
    }
    let dist = LogProbDist::new(entries, true).map_err(|e| malformed(e.to_string()))?;
    Ok((dist, response))
}

pub fn parse_health(body: &str) -> Result<Health, BackendError> {
    let health: Health = serde_json::from_str(body).map_err(|e| BackendError::Malformed {
        context_hash: "-".into(),
        reason: format!("health: {e}"),
    })?;
    if health.status != "ok" {
        return Err(BackendError::Unreachable {
            context_hash: "-".into(),
            reason: format!("health status {:?}", health.status),
        });
    }
    Ok(health)
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// HTTP client for the next-token wire protocol.
///
/// Responses are cached per context for the lifetime of the client, and at
/// most `max_in_flight` requests run at once.
pub struct RemoteBackend<F> {
    endpoint: String,
    options: RemoteOptions,
    client: reqwest::blocking::Client,
    cache: Mutex<HashMap<[u8; 32], LogProbDist<F>>>,
    limiter: Limiter,
    eos: OnceLock<String>,
    model: OnceLock<String>,
}

impl<F: Scalar> RemoteBackend<F> {
    pub fn new(endpoint: &str, options: RemoteOptions) -> Result<Self, BackendError> {
        if options.top_k < 2 {
            return Err(BackendError::Config(format!(
                "remote top_k must be at least 2, got {}",
                options.top_k
            )));
        }
        if options.max_in_flight == 0 {
            return Err(BackendError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if !(options.timeout_secs > 0.0 && options.timeout_secs.is_finite()) {
            return Err(BackendError::Config(format!(
                "timeout must be positive, got {}",
                options.timeout_secs
            )));
        }
        let endpoint = endpoint.trim_end_matches('/').to_owned();
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(BackendError::Config(format!(
                "endpoint {endpoint:?} must be an http(s) URL"
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(options.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        let limiter = Limiter {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max: options.max_in_flight,
        };
        Ok(Self {
            endpoint,
            options,
            client,
            cache: Mutex::new(HashMap::new()),
            limiter,
            eos: OnceLock::new(),
            model: OnceLock::new(),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn top_k(&self) -> usize {
        self.options.top_k
    }

    pub fn cached_contexts(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }

    fn transport_error(e: reqwest::Error, context_hash: String) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout { context_hash }
        } else {
            BackendError::Unreachable {
                context_hash,
                reason: e.to_string(),
            }
        }
    }

    pub fn health(&self) -> Result<Health, BackendError> {
        let _permit = self.limiter.acquire();
        let response = self
            .client
            .get(format!("{}/v1/health", self.endpoint))
            .send()
            .map_err(|e| Self::transport_error(e, "-".into()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| Self::transport_error(e, "-".into()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                context_hash: "-".into(),
                body,
            });
        }
        let health = parse_health(&body)?;
        let _ = self.model.set(health.model.clone());
        Ok(health)
    }

    fn fetch(&self, context: &str, hash: &str) -> Result<LogProbDist<F>, BackendError> {
        let _permit = self.limiter.acquire();
        let request = WireRequest {
            context: context.to_owned(),
            top_k: self.options.top_k,
        };
        let response = self
            .client
            .post(format!("{}/v1/next_token_logprobs", self.endpoint))
            .json(&request)
            .send()
            .map_err(|e| Self::transport_error(e, hash.to_owned()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| Self::transport_error(e, hash.to_owned()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                context_hash: hash.to_owned(),
                body,
            });
        }
        let (dist, wire) = parse_next_token_response(&body, self.options.top_k, hash)?;
        if let Some(eos) = wire.eos {
            let _ = self.eos.set(eos);
        }
        let _ = self.model.set(wire.model);
        Ok(dist)
    }
}

impl<F: Scalar> Backend<F> for RemoteBackend<F> {
    fn next_token_logprobs(&self, context: &str) -> Result<LogProbDist<F>, BackendError> {
        if context.is_empty() {
            return Err(BackendError::EmptyContext);
        }
        let key: [u8; 32] = Sha256::digest(context.as_bytes()).into();
        if let Some(hit) = self.cache.lock().ok().and_then(|c| c.get(&key).cloned()) {
            return Ok(hit);
        }
        let hash = context_hash(context);
        let dist = self.fetch(context, &hash)?;
        if let Ok(mut cache) = self.cache.lock() {
            cache.insert(key, dist.clone());
        }
        Ok(dist)
    }

    fn eos_token(&self) -> Option<String> {
        self.eos.get().cloned()
    }

    fn describe(&self) -> String {
        match self.model.get() {
            Some(model) => format!(
                "remote {} ({model}, top_k {})",
                self.endpoint, self.options.top_k
            ),
            None => format!("remote {} (top_k {})", self.endpoint, self.options.top_k),
        }
    }
}
