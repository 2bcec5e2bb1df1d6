use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Backend, BackendError};
use crate::distributions::LogProbDist;
use crate::scalar::Scalar;

const NEWLINE: &str = "\n";

/// Count-based bigram model with additive smoothing.
///
/// Token strings are emitted verbatim; lookups key on the token with
/// surrounding spaces removed, so `" b"` and `"b"` share counts.
#[derive(Debug, Clone)]
pub struct BigramBackend<F> {
    counts: HashMap<String, BTreeMap<String, u64>>,
    vocab: BTreeSet<String>,
    smoothing: f64,
    _scalar: std::marker::PhantomData<F>,
}

fn key(token: &str) -> &str {
    if token == NEWLINE {
        NEWLINE
    } else {
        token.trim_matches(' ')
    }
}

/// `P(next | prev) = (count(prev, next) + s) / (count(prev) + s * |V|)`.
pub fn fit_bigram<F: Scalar, S: AsRef<str>>(
    corpus: &[S],
    smoothing: f64,
) -> Result<BigramBackend<F>, BackendError> {
    if corpus.len() < 2 {
        return Err(BackendError::Config(
            "bigram corpus needs at least two tokens".into(),
        ));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(BackendError::Config(format!(
            "smoothing must be finite and >= 0, got {smoothing}"
        )));
    }
    let mut counts: HashMap<String, BTreeMap<String, u64>> = HashMap::new();
    for pair in corpus.windows(2) {
        let (prev, next) = (pair[0].as_ref(), pair[1].as_ref());
        *counts
            .entry(key(prev).to_owned())
            .or_default()
            .entry(next.to_owned())
            .or_default() += 1;
    }
    let vocab: BTreeSet<String> = corpus.iter().map(|t| t.as_ref().to_owned()).collect();
    if vocab.len() < 2 {
        return Err(BackendError::Config(
            "bigram vocabulary needs at least two distinct tokens".into(),
        ));
    }
    Ok(BigramBackend {
        counts,
        vocab,
        smoothing,
        _scalar: std::marker::PhantomData,
    })
}

impl<F: Scalar> BigramBackend<F> {
    /// Whitespace tokenization; words become `" word"` and line breaks `"\n"`.
    pub fn from_text(text: &str, smoothing: f64) -> Result<Self, BackendError> {
        let mut tokens = Vec::new();
        for line in text.lines() {
            let words: Vec<_> = line.split_whitespace().collect();
            if words.is_empty() {
                continue;
            }
            tokens.extend(words.into_iter().map(|w| format!(" {w}")));
            tokens.push(NEWLINE.to_owned());
        }
        fit_bigram(&tokens, smoothing)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn previous(context: &str) -> &str {
        if context.ends_with('\n') {
            NEWLINE
        } else {
            context.split_whitespace().next_back().unwrap_or("")
        }
    }
}

impl<F: Scalar> Backend<F> for BigramBackend<F> {
    fn next_token_logprobs(&self, context: &str) -> Result<LogProbDist<F>, BackendError> {
        let prev = Self::previous(context);
        let row = self.counts.get(prev);
        let seen: u64 = row.map(|r| r.values().sum()).unwrap_or(0);
        let vocab = self.vocab.len() as f64;
        let denom = seen as f64 + self.smoothing * vocab;

        let probs: Vec<(String, F)> = if denom == 0.0 {
            // Unseen history without smoothing: fall back to uniform.
            self.vocab
                .iter()
                .map(|t| (t.clone(), F::of(1.0 / vocab)))
                .collect()
        } else {
            self.vocab
                .iter()
                .map(|t| {
                    let c = row.and_then(|r| r.get(t)).copied().unwrap_or(0) as f64;
                    (t.clone(), F::of((c + self.smoothing) / denom))
                })
                .collect()
        };
        LogProbDist::from_probs(probs, false).map_err(BackendError::from)
    }

    fn describe(&self) -> String {
        format!(
            "bigram ({} tokens, smoothing {})",
            self.vocab.len(),
            self.smoothing
        )
    }
}
