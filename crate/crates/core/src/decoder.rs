//! Autoregressive decoding loops.
//!
//! [`decode_ced`] runs two streams, plain and example-prefixed, and extends
//! both with the same selected token so the two distributions at each step
//! always describe the same next position. [`decode_greedy`] is the
//! single-stream argmax baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::distributions::{
    check_floor, contrast, CedScore, DistError, LogProbDist, DEFAULT_ALPHA, DEFAULT_FLOOR,
};
use crate::fusion::PromptPair;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    Ced,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Greedy => "greedy",
            Method::Ced => "ced",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "greedy" | "lens" => Ok(Method::Greedy),
            "ced" => Ok(Method::Ced),
            other => Err(format!("unknown method {other:?} (expected greedy or ced)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct DecodeParams<F> {
    pub alpha: F,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
    /// Log-probability for tokens missing from one side of a truncated pair.
    pub floor: F,
}

impl<F: Scalar> Default for DecodeParams<F> {
    fn default() -> Self {
        Self {
            alpha: F::of(DEFAULT_ALPHA),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stop_sequences: vec!["\n".into()],
            floor: F::of(DEFAULT_FLOOR),
        }
    }
}

impl<F: Scalar> DecodeParams<F> {
    pub fn validate(&self) -> Result<(), DecodeError<F>> {
        if !(self.alpha >= F::zero() && self.alpha <= F::one()) {
            return Err(DecodeError::Params(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(DecodeError::Params(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if self.stop_sequences.iter().any(String::is_empty) {
            return Err(DecodeError::Params(
                "stop sequences must be non-empty".into(),
            ));
        }
        check_floor(self.floor).map_err(|e| DecodeError::Params(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopSequence,
    MaxTokens,
    Eos,
}

/// What the decoder saw and chose at one position.
///
/// Greedy steps fill only `p_dist` and leave `head`/`scores` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct TraceStep<F> {
    pub p_dist: Option<LogProbDist<F>>,
    pub p_tilde_dist: Option<LogProbDist<F>>,
    pub head: BTreeSet<String>,
    pub scores: BTreeMap<String, CedScore<F>>,
    pub selected: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct DecodeTrace<F> {
    pub method: Method,
    /// Context conditioning `p` (the only context for greedy decoding).
    pub prompt_plain: Option<String>,
    /// Context conditioning `p_tilde`.
    pub prompt_with_examples: Option<String>,
    pub steps: Vec<TraceStep<F>>,
    pub output: String,
    pub stop_reason: Option<StopReason>,
    pub eos: Option<String>,
}

impl<F: Scalar> DecodeTrace<F> {
    fn start(method: Method, plain: Option<&str>, with_examples: Option<&str>) -> Self {
        Self {
            method,
            prompt_plain: plain.map(str::to_owned),
            prompt_with_examples: with_examples.map(str::to_owned),
            steps: Vec::new(),
            output: String::new(),
            stop_reason: None,
            eos: None,
        }
    }

    /// Selected tokens concatenated, including any stop text and EOS.
    pub fn generated(&self) -> String {
        self.steps.iter().map(|s| s.selected.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Error)]
pub enum DecodeError<F: Scalar> {
    #[error("invalid decode parameters: {0}")]
    Params(String),
    #[error("backend failed after {} steps: {source}", partial.steps.len())]
    Backend {
        #[source]
        source: BackendError,
        partial: Box<DecodeTrace<F>>,
    },
    #[error("cannot score step {}: {source}", partial.steps.len())]
    Scoring {
        #[source]
        source: DistError,
        partial: Box<DecodeTrace<F>>,
    },
}

impl<F: Scalar> DecodeError<F> {
    pub fn partial(&self) -> Option<&DecodeTrace<F>> {
        match self {
            Self::Params(_) => None,
            Self::Backend { partial, .. } | Self::Scoring { partial, .. } => Some(partial),
        }
    }

    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            Self::Backend { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Earliest occurrence of any stop sequence in the generated text.
fn find_stop(generated: &str, stops: &[String]) -> Option<usize> {
    stops
        .iter()
        .filter_map(|s| generated.find(s.as_str()))
        .min()
}

/// Appends the chosen token and reports whether decoding is finished.
fn advance<F: Scalar>(
    trace: &mut DecodeTrace<F>,
    generated: &mut String,
    step: TraceStep<F>,
    eos: Option<&str>,
    params: &DecodeParams<F>,
) -> bool {
    let token = step.selected.clone();
    trace.steps.push(step);
    if eos == Some(token.as_str()) {
        trace.output = generated.clone();
        trace.stop_reason = Some(StopReason::Eos);
        return true;
    }
    generated.push_str(&token);
    if let Some(at) = find_stop(generated, &params.stop_sequences) {
        trace.output = generated[..at].to_owned();
        trace.stop_reason = Some(StopReason::StopSequence);
        return true;
    }
    if trace.steps.len() >= params.max_new_tokens {
        trace.output = generated.clone();
        trace.stop_reason = Some(StopReason::MaxTokens);
        return true;
    }
    false
}

/// Contrastive-example decoding over a prompt pair.
///
/// Each step queries the backend with `plain + generated` and
/// `with_examples + generated`, aligns the two supports, and appends the
/// highest-scoring head token to both streams.
pub fn decode_ced<F: Scalar, B: Backend<F> + ?Sized>(
    backend: &B,
    prompts: &PromptPair,
    params: &DecodeParams<F>,
) -> Result<DecodeTrace<F>, DecodeError<F>> {
    params.validate()?;
    let eos = backend.eos_token();
    let mut trace = DecodeTrace::start(
        Method::Ced,
        Some(&prompts.plain),
        Some(&prompts.with_examples),
    );
    trace.eos = eos.clone();
    let mut generated = String::new();

    loop {
        let plain_ctx = format!("{}{generated}", prompts.plain);
        let example_ctx = format!("{}{generated}", prompts.with_examples);
        let (p, p_tilde) = rayon::join(
            || backend.next_token_logprobs(&plain_ctx),
            || backend.next_token_logprobs(&example_ctx),
        );
        let (p, p_tilde) = match (p, p_tilde) {
            (Ok(p), Ok(pt)) => (p, pt),
            (Err(source), _) | (_, Err(source)) => {
                trace.output = generated;
                return Err(DecodeError::Backend {
                    source,
                    partial: Box::new(trace),
                });
            }
        };
        let scored = match contrast(&p_tilde, &p, params.alpha, params.floor) {
            Ok(s) => s,
            Err(source) => {
                trace.output = generated;
                return Err(DecodeError::Scoring {
                    source,
                    partial: Box::new(trace),
                });
            }
        };
        log::trace!("ced step {}: {:?}", trace.steps.len(), scored.selected);
        let step = TraceStep {
            p_dist: Some(p),
            p_tilde_dist: Some(p_tilde),
            head: scored.head,
            scores: scored.scores,
            selected: scored.selected,
        };
        if advance(&mut trace, &mut generated, step, eos.as_deref(), params) {
            return Ok(trace);
        }
    }
}

/// Plain argmax decoding of a single context. Ties go to the smallest token string.
pub fn decode_greedy<F: Scalar, B: Backend<F> + ?Sized>(
    backend: &B,
    prompt: &str,
    params: &DecodeParams<F>,
) -> Result<DecodeTrace<F>, DecodeError<F>> {
    params.validate()?;
    let eos = backend.eos_token();
    let mut trace = DecodeTrace::start(Method::Greedy, Some(prompt), None);
    trace.eos = eos.clone();
    let mut generated = String::new();

    loop {
        let dist = match backend.next_token_logprobs(&format!("{prompt}{generated}")) {
            Ok(d) => d,
            Err(source) => {
                trace.output = generated;
                return Err(DecodeError::Backend {
                    source,
                    partial: Box::new(trace),
                });
            }
        };
        let step = TraceStep {
            selected: dist.argmax().to_owned(),
            p_dist: Some(dist),
            p_tilde_dist: None,
            head: BTreeSet::new(),
            scores: BTreeMap::new(),
        };
        if advance(&mut trace, &mut generated, step, eos.as_deref(), params) {
            return Ok(trace);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{build_toy_table, ReplayBackend, TableBackend, TableRule};
    use crate::fusion::{build_prompt_pair, ContextExample, DescriptiveFeatures, PromptTemplate};

    fn rule(suffix: &str, probs: &[(&str, f64)]) -> TableRule<f64> {
        TableRule {
            suffix: suffix.into(),
            dist: LogProbDist::from_probs(probs.iter().copied(), false).unwrap(),
        }
    }

    fn features(tag: &str) -> DescriptiveFeatures {
        DescriptiveFeatures {
            tags: vec![tag.into()],
            attributes: vec![],
            captions: vec![format!("a {tag}")],
        }
    }

    fn pair(k: usize) -> PromptPair {
        let shot = ContextExample {
            features: features("cat"),
            question: "what animal?".into(),
            answer: "dog".into(),
            question_type: "what animal".into(),
        };
        let shots = vec![shot; k];
        build_prompt_pair(
            &shots,
            &features("pet"),
            "what animal?",
            5,
            &PromptTemplate::default(),
        )
        .unwrap()
    }

    /// Plain context favours " cat"; any context with a shot ending in
    /// "Answer: dog" favours " dog".
    fn animal_table() -> TableBackend<f64> {
        let body = pair(0).body().to_owned();
        build_toy_table([
            rule("", &[("\n", 0.9), (" cat", 0.05), (" dog", 0.05)]),
            rule("Answer:", &[(" cat", 0.6), (" dog", 0.4)]),
            rule(
                &format!("Answer: dog\n\n{body}"),
                &[(" cat", 0.3), (" dog", 0.7)],
            ),
        ])
        .unwrap()
    }

    #[test]
    fn contrast_flips_the_first_token() {
        let table = animal_table();
        let params = DecodeParams::default();
        let trace = decode_ced(&table, &pair(1), &params).unwrap();
        // log(0.7/0.4) = 0.56 beats log(0.3/0.6) = -0.69
        assert_eq!(trace.steps[0].selected, " dog");
        assert_eq!(trace.output, " dog");
        assert_eq!(trace.stop_reason, Some(StopReason::StopSequence));

        let greedy = decode_greedy(&table, &pair(1).with_examples, &params).unwrap();
        assert_eq!(greedy.output, " dog");
        let plain = decode_greedy(&table, &pair(1).plain, &params).unwrap();
        assert_eq!(plain.output, " cat");
    }

    #[test]
    fn zero_shots_match_greedy() {
        let table = animal_table();
        let params = DecodeParams::default();
        let ced = decode_ced(&table, &pair(0), &params).unwrap();
        let greedy = decode_greedy(&table, &pair(0).plain, &params).unwrap();
        assert_eq!(ced.output, greedy.output);
        assert_eq!(ced.output, " cat");
        assert!(ced
            .steps
            .iter()
            .all(|s| s.head.iter().all(|t| s.scores[t] == CedScore::Finite(0.0))));
    }

    #[test]
    fn stop_sequence_cuts_output() {
        let table = build_toy_table([
            rule("", &[("a", 0.6), ("\n", 0.4)]),
            rule("aaa", &[("a", 0.1), ("\n", 0.9)]),
        ])
        .unwrap();
        let params = DecodeParams::default();
        let trace = decode_greedy(&table, "go:", &params).unwrap();
        assert_eq!(trace.steps.len(), 4);
        assert_eq!(trace.output, "aaa");
        assert_eq!(trace.stop_reason, Some(StopReason::StopSequence));
        assert_eq!(trace.generated(), "aaa\n");

        let one = DecodeParams {
            max_new_tokens: 1,
            stop_sequences: vec![],
            ..DecodeParams::default()
        };
        let trace = decode_greedy(&table, "go:", &one).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.stop_reason, Some(StopReason::MaxTokens));
    }

    #[test]
    fn stop_on_token_text() {
        let table = build_toy_table([rule("", &[("a", 0.7), ("b", 0.3)])]).unwrap();
        let params = DecodeParams {
            stop_sequences: vec!["a".into()],
            ..DecodeParams::default()
        };
        let trace = decode_greedy(&table, "x", &params).unwrap();
        assert_eq!(trace.output, "");
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].selected, "a");
        let twice = decode_greedy(&table, "x", &params).unwrap();
        assert_eq!(trace, twice);
    }

    #[test]
    fn eos_ends_generation() {
        let table = build_toy_table([
            rule("", &[("x", 0.6), ("</s>", 0.4)]),
            rule("x", &[("x", 0.2), ("</s>", 0.8)]),
        ])
        .unwrap()
        .with_eos(Some("</s>".into()));
        let trace = decode_greedy(&table, "p", &DecodeParams::default()).unwrap();
        assert_eq!(trace.output, "x");
        assert_eq!(trace.stop_reason, Some(StopReason::Eos));
    }

    #[test]
    fn invalid_params() {
        let table = animal_table();
        for params in [
            DecodeParams {
                alpha: 1.5,
                ..DecodeParams::default()
            },
            DecodeParams {
                max_new_tokens: 0,
                ..DecodeParams::default()
            },
            DecodeParams {
                floor: 1.0,
                ..DecodeParams::default()
            },
            DecodeParams {
                stop_sequences: vec![String::new()],
                ..DecodeParams::default()
            },
        ] {
            assert!(matches!(
                decode_ced(&table, &pair(1), &params),
                Err(DecodeError::Params(_))
            ));
        }
    }

    #[test]
    fn backend_failure_keeps_partial_trace() {
        let full = decode_ced(&animal_table(), &pair(1), &DecodeParams::default()).unwrap();
        assert_eq!(full.steps.len(), 2);
        let first_only = DecodeTrace {
            steps: full.steps[..1].to_vec(),
            ..full.clone()
        };
        let replay = ReplayBackend::from_trace(&first_only);
        let err = decode_ced(&replay, &pair(1), &DecodeParams::default()).unwrap_err();
        let partial = err.partial().unwrap();
        assert_eq!(partial.steps.len(), 1);
        assert_eq!(partial.output, " dog");
        assert!(matches!(
            err.backend_error(),
            Some(BackendError::ReplayMiss { .. })
        ));
    }

    #[test]
    fn replay_reproduces_output() {
        let trace = decode_ced(&animal_table(), &pair(2), &DecodeParams::default()).unwrap();
        let json = trace.to_json();
        let restored = DecodeTrace::<f64>::from_json(&json).unwrap();
        assert_eq!(restored, trace);
        let replay = ReplayBackend::from_trace(&restored);
        let again = decode_ced(&replay, &pair(2), &DecodeParams::default()).unwrap();
        assert_eq!(again, trace);
    }

    #[test]
    fn streams_share_the_generated_suffix() {
        let trace = decode_ced(&animal_table(), &pair(2), &DecodeParams::default()).unwrap();
        let prompts = pair(2);
        let mut generated = String::new();
        for step in &trace.steps {
            let with = format!("{}{generated}", prompts.with_examples);
            let (header, rest) = prompts.strip_examples(&with).unwrap();
            assert_eq!(
                format!("{header}{rest}"),
                format!("{}{generated}", prompts.plain)
            );
            assert!(step.head.contains(&step.selected));
            generated.push_str(&step.selected);
        }
    }
}
