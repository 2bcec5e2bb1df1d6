//! Run configuration: an optional TOML file overridden by flags.

use std::path::{Path, PathBuf};

use ced_core::backend::{
    RemoteOptions, DEFAULT_MAX_IN_FLIGHT, DEFAULT_TIMEOUT_SECS, DEFAULT_TOP_K,
};
use ced_core::{
    BackendDescriptor, DecodeParams, ExperimentGrid, Method, Metric, PromptTemplate,
    SelectionStrategy, DEFAULT_ALPHA, DEFAULT_FLOOR, DEFAULT_TOP_N,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run needs. Field names double as TOML keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// `table:PATH`, `bigram:PATH` or `remote:URL`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub alpha: f64,
    pub top_n: usize,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
    pub floor: f64,
    pub metric: Metric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; unset means one per processor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    pub verbosity: u8,
    /// Additive smoothing for `bigram:` backends.
    pub smoothing: f64,
    pub top_k: usize,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = ExperimentGrid::default();
        let params = DecodeParams::default();
        Self {
            dataset: None,
            backend: None,
            methods: grid.methods,
            shots: grid.shots,
            strategy: grid.strategy,
            seed: grid.seed,
            alpha: DEFAULT_ALPHA,
            top_n: DEFAULT_TOP_N,
            max_new_tokens: params.max_new_tokens,
            stop: params.stop_sequences,
            floor: DEFAULT_FLOOR,
            metric: grid.metric,
            template: None,
            out: None,
            jobs: None,
            verbosity: 0,
            smoothing: 0.0,
            top_k: DEFAULT_TOP_K,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset given (use --dataset)".into()))
    }

    pub fn backend_descriptor(&self) -> Result<BackendDescriptor, CliError> {
        let raw = self
            .backend
            .as_deref()
            .ok_or_else(|| CliError::Config("no backend given (use --backend)".into()))?;
        let mut descriptor: BackendDescriptor = raw
            .parse()
            .map_err(|e: ced_core::BackendError| CliError::Config(e.to_string()))?;
        match &mut descriptor {
            BackendDescriptor::Bigram { smoothing, .. } => *smoothing = self.smoothing,
            BackendDescriptor::Remote { options, .. } => {
                *options = RemoteOptions {
                    top_k: self.top_k,
                    timeout_secs: self.timeout_secs,
                    max_in_flight: self.max_in_flight,
                }
            }
            BackendDescriptor::Table { .. } => {}
        }
        Ok(descriptor)
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            alpha: self.alpha,
            max_new_tokens: self.max_new_tokens,
            stop_sequences: self.stop.clone(),
            floor: self.floor,
        }
    }

    pub fn prompt_template(&self) -> Result<PromptTemplate, CliError> {
        match &self.template {
            Some(path) => PromptTemplate::load(path).map_err(|e| CliError::Config(e.to_string())),
            None => Ok(PromptTemplate::default()),
        }
    }

    /// Builds and checks the experiment grid. Bad values are config errors.
    pub fn grid(&self) -> Result<ExperimentGrid, CliError> {
        let grid = ExperimentGrid {
            methods: self.methods.clone(),
            shots: self.shots.clone(),
            strategy: self.strategy,
            seed: self.seed,
            params: self.decode_params(),
            top_n: self.top_n,
            template: self.prompt_template()?,
            metric: self.metric,
            jobs: self.jobs,
        };
        grid.params
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if grid.methods.is_empty() || grid.shots.is_empty() {
            return Err(CliError::Config(
                "methods and shots must be non-empty".into(),
            ));
        }
        if grid.top_n == 0 {
            return Err(CliError::Config("top_n must be at least 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        Ok(grid)
    }

    /// The config as embedded in reports: output location dropped, since it
    /// does not affect results.
    pub fn echo(&self) -> Self {
        Self {
            out: None,
            ..self.clone()
        }
    }
}
