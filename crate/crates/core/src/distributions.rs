//! Next-token distributions and the contrastive-example score.
//!
//! A [`LogProbDist`] holds natural-log probabilities keyed by the backend's
//! literal token strings. The contrastive score of a token is
//! `log p_tilde(t) - log p(t)`, where `p_tilde` conditions on prepended
//! in-context examples and `p` does not. Only tokens in the adaptive head
//! `{t : p_tilde(t) >= alpha * max_w p_tilde(w)}` are eligible; everything
//! else is masked.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Plausibility cutoff used when nothing else is configured.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Log-probability assigned to tokens missing from a truncated distribution (about 2e-9).
pub const DEFAULT_FLOOR: f64 = -20.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("distribution has no entries")]
    Empty,
    #[error("log-probability for token {token:?} must be finite and <= 0, got {value}")]
    InvalidLogProb { token: String, value: f64 },
    #[error("full distribution does not normalize: exp-sum = {sum}")]
    NotNormalized { sum: f64 },
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("floor must be finite and <= 0, got {0}")]
    InvalidFloor(f64),
    #[error("distributions share no tokens; they cannot come from the same vocabulary")]
    DisjointSupports,
}

/// Natural-log next-token probabilities over a (possibly truncated) vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar", try_from = "RawLogProbDist<F>")]
pub struct LogProbDist<F> {
    entries: BTreeMap<String, F>,
    truncated: bool,
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct RawLogProbDist<F> {
    entries: BTreeMap<String, F>,
    #[serde(default)]
    truncated: bool,
}

impl<F: Scalar> TryFrom<RawLogProbDist<F>> for LogProbDist<F> {
    type Error = DistError;

    fn try_from(raw: RawLogProbDist<F>) -> Result<Self, Self::Error> {
        LogProbDist::new(raw.entries, raw.truncated)
    }
}

impl<F: Scalar> LogProbDist<F> {
    /// Validates and wraps a token → log-probability map.
    ///
    /// Full (non-truncated) distributions must exp-sum to one.
    pub fn new(entries: BTreeMap<String, F>, truncated: bool) -> Result<Self, DistError> {
        if entries.is_empty() {
            return Err(DistError::Empty);
        }
        for (token, &value) in &entries {
            if !value.is_finite() || value > F::zero() {
                return Err(DistError::InvalidLogProb {
                    token: token.clone(),
                    value: value.as_f64(),
                });
            }
        }
        let dist = Self { entries, truncated };
        if !truncated {
            let sum = dist.exp_sum();
            if (sum - F::one()).abs() > F::normalization_tolerance(dist.len()) {
                return Err(DistError::NotNormalized { sum: sum.as_f64() });
            }
        }
        Ok(dist)
    }

    /// Builds a distribution from plain probabilities. Zero-probability tokens are dropped.
    pub fn from_probs<I, K>(probs: I, truncated: bool) -> Result<Self, DistError>
    where
        I: IntoIterator<Item = (K, F)>,
        K: Into<String>,
    {
        let mut entries = BTreeMap::new();
        for (token, prob) in probs {
            let token = token.into();
            if prob == F::zero() {
                continue;
            }
            if prob.is_nan() || prob < F::zero() {
                return Err(DistError::InvalidLogProb {
                    token,
                    value: prob.as_f64(),
                });
            }
            entries.insert(token, prob.ln());
        }
        Self::new(entries, truncated)
    }

    pub(crate) fn new_unchecked(entries: BTreeMap<String, F>, truncated: bool) -> Self {
        debug_assert!(!entries.is_empty());
        Self { entries, truncated }
    }

    pub fn entries(&self) -> &BTreeMap<String, F> {
        &self.entries
    }

    pub fn into_entries(self) -> BTreeMap<String, F> {
        self.entries
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Always false for a validated distribution.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<F> {
        self.entries.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn exp_sum(&self) -> F {
        self.entries
            .values()
            .fold(F::zero(), |acc, &lp| acc + lp.exp())
    }

    pub fn max_logprob(&self) -> F {
        self.entries
            .values()
            .fold(F::neg_infinity(), |acc, &lp| acc.max(lp))
    }

    /// Most probable token; ties go to the lexicographically smallest token.
    pub fn argmax(&self) -> &str {
        let mut best: Option<(&str, F)> = None;
        for (token, &lp) in &self.entries {
            match best {
                Some((_, best_lp)) if lp <= best_lp => {}
                _ => best = Some((token, lp)),
            }
        }
        best.map(|(t, _)| t).unwrap_or_default()
    }
}

/// Converts arbitrary finite log-weights into a full distribution via log-sum-exp.
pub fn normalize<F: Scalar>(logweights: &BTreeMap<String, F>) -> Result<LogProbDist<F>, DistError> {
    if logweights.is_empty() {
        return Err(DistError::Empty);
    }
    if let Some((token, value)) = logweights.iter().find(|(_, v)| !v.is_finite()) {
        return Err(DistError::InvalidLogProb {
            token: token.clone(),
            value: value.as_f64(),
        });
    }
    let max = logweights
        .values()
        .fold(F::neg_infinity(), |acc, &w| acc.max(w));
    let sum = logweights
        .values()
        .fold(F::zero(), |acc, &w| acc + (w - max).exp());
    let lse = max + sum.ln();
    let entries = logweights
        .iter()
        .map(|(token, &w)| (token.clone(), (w - lse).min(F::zero())))
        .collect();
    LogProbDist::new(entries, false)
}

/// Tokens whose probability is at least `alpha` times the maximum probability.
///
/// The argmax always qualifies, so the result is never empty.
pub fn adaptive_head<F: Scalar>(
    p_tilde: &LogProbDist<F>,
    alpha: F,
) -> Result<BTreeSet<String>, DistError> {
    check_alpha(alpha)?;
    let max = p_tilde.max_logprob();
    Ok(p_tilde
        .entries
        .iter()
        .filter(|(_, &lp)| (lp - max).exp() >= alpha)
        .map(|(token, _)| token.clone())
        .collect())
}

fn check_alpha<F: Scalar>(alpha: F) -> Result<(), DistError> {
    if alpha >= F::zero() && alpha <= F::one() {
        Ok(())
    } else {
        Err(DistError::InvalidAlpha(alpha.as_f64()))
    }
}

pub(crate) fn check_floor<F: Scalar>(floor: F) -> Result<(), DistError> {
    if floor.is_finite() && floor <= F::zero() {
        Ok(())
    } else {
        Err(DistError::InvalidFloor(floor.as_f64()))
    }
}

/// Extends both distributions to the union of their supports.
///
/// A token missing on one side gets `floor` there. When the key sets already
/// coincide the inputs come back unchanged; otherwise both results are
/// flagged truncated.
pub fn align_supports<F: Scalar>(
    p_tilde: &LogProbDist<F>,
    p: &LogProbDist<F>,
    floor: F,
) -> (LogProbDist<F>, LogProbDist<F>) {
    debug_assert!(check_floor(floor).is_ok());
    if p_tilde.entries.keys().eq(p.entries.keys()) {
        return (p_tilde.clone(), p.clone());
    }
    let fill = |dist: &LogProbDist<F>, other: &LogProbDist<F>| {
        let mut entries = dist.entries.clone();
        for token in other.entries.keys() {
            entries.entry(token.clone()).or_insert(floor);
        }
        LogProbDist::new_unchecked(entries, true)
    };
    (fill(p_tilde, p), fill(p, p_tilde))
}

/// Contrastive score of one candidate token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CedScore<F> {
    Finite(F),
    /// Outside the adaptive head; behaves as negative infinity. Serialized as `null`.
    Masked,
}

impl<F: Scalar> CedScore<F> {
    pub fn value(self) -> F {
        match self {
            CedScore::Finite(v) => v,
            CedScore::Masked => F::neg_infinity(),
        }
    }

    pub fn is_masked(self) -> bool {
        matches!(self, CedScore::Masked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ScoredCandidates<F> {
    pub scores: BTreeMap<String, CedScore<F>>,
    pub head: BTreeSet<String>,
    pub selected: String,
}

/// Scores every token of `p_tilde` and selects the winner, using [`DEFAULT_FLOOR`]
/// for head tokens absent from `p`.
pub fn ced_scores<F: Scalar>(
    p_tilde: &LogProbDist<F>,
    p: &LogProbDist<F>,
    alpha: F,
) -> Result<ScoredCandidates<F>, DistError> {
    ced_scores_with_floor(p_tilde, p, alpha, F::of(DEFAULT_FLOOR))
}

/// Masked contrastive scoring.
///
/// Head tokens score `log p_tilde(t) - log p(t)`; a head token missing from `p`
/// uses `floor` in its place. The winner is the highest score, ties broken by
/// higher `p_tilde` and then by the smallest token string.
pub fn ced_scores_with_floor<F: Scalar>(
    p_tilde: &LogProbDist<F>,
    p: &LogProbDist<F>,
    alpha: F,
    floor: F,
) -> Result<ScoredCandidates<F>, DistError> {
    check_floor(floor)?;
    if !p_tilde.tokens().any(|t| p.contains(t)) {
        return Err(DistError::DisjointSupports);
    }
    let head = adaptive_head(p_tilde, alpha)?;

    let mut scores = BTreeMap::new();
    let mut best: Option<(&str, F, F)> = None;
    for (token, &lp_tilde) in &p_tilde.entries {
        if !head.contains(token) {
            scores.insert(token.clone(), CedScore::Masked);
            continue;
        }
        let score = lp_tilde - p.get(token).unwrap_or(floor);
        scores.insert(token.clone(), CedScore::Finite(score));
        // Entries iterate in ascending token order, so keeping the incumbent on
        // a full tie prefers the smaller token string.
        let better = match best {
            None => true,
            Some((_, best_score, best_lp)) => match score.partial_cmp(&best_score) {
                Some(Ordering::Greater) => true,
                Some(Ordering::Equal) => lp_tilde > best_lp,
                _ => false,
            },
        };
        if better {
            best = Some((token, score, lp_tilde));
        }
    }

    let selected = best.map(|(t, _, _)| t.to_owned()).ok_or(DistError::Empty)?;
    Ok(ScoredCandidates {
        scores,
        head,
        selected,
    })
}

/// Disjointness check, support alignment, then masked scoring.
pub fn contrast<F: Scalar>(
    p_tilde: &LogProbDist<F>,
    p: &LogProbDist<F>,
    alpha: F,
    floor: F,
) -> Result<ScoredCandidates<F>, DistError> {
    check_floor(floor)?;
    if !p_tilde.tokens().any(|t| p.contains(t)) {
        return Err(DistError::DisjointSupports);
    }
    let (p_tilde, p) = align_supports(p_tilde, p, floor);
    ced_scores_with_floor(&p_tilde, &p, alpha, floor)
}
