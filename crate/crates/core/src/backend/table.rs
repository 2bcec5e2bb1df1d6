use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError};
use crate::distributions::{normalize, LogProbDist};
use crate::scalar::Scalar;

/// A context suffix and the distribution served when it is the longest match.
#[derive(Debug, Clone)]
pub struct TableRule<F> {
    pub suffix: String,
    pub dist: LogProbDist<F>,
}

/// Deterministic lookup model: the longest rule suffix matching the context wins.
#[derive(Debug, Clone)]
pub struct TableBackend<F> {
    // Suffix length, longest first, then exact suffix text.
    by_len: BTreeMap<std::cmp::Reverse<usize>, HashMap<String, LogProbDist<F>>>,
    vocab: BTreeSet<String>,
    eos: Option<String>,
}

/// Requires a rule with the empty suffix as the default, and rejects two
/// rules with the same suffix since they would tie on every matching context.
pub fn build_toy_table<F: Scalar>(
    rules: impl IntoIterator<Item = TableRule<F>>,
) -> Result<TableBackend<F>, BackendError> {
    let mut by_len: BTreeMap<_, HashMap<String, LogProbDist<F>>> = BTreeMap::new();
    let mut vocab = BTreeSet::new();
    for rule in rules {
        vocab.extend(rule.dist.tokens().map(str::to_owned));
        let bucket = by_len
            .entry(std::cmp::Reverse(rule.suffix.len()))
            .or_default();
        if bucket.contains_key(&rule.suffix) {
            return Err(BackendError::Config(format!(
                "ambiguous table: two rules share the suffix {:?}",
                rule.suffix
            )));
        }
        bucket.insert(rule.suffix, rule.dist);
    }
    if !by_len
        .get(&std::cmp::Reverse(0))
        .is_some_and(|b| b.contains_key(""))
    {
        return Err(BackendError::Config(
            "table needs a default rule with an empty suffix".into(),
        ));
    }
    if vocab.len() < 2 {
        return Err(BackendError::Config(
            "table vocabulary needs at least two tokens".into(),
        ));
    }
    Ok(TableBackend {
        by_len,
        vocab,
        eos: None,
    })
}

/// On-disk table format.
///
/// Each rule gives either `probs` (normalized after taking logs) or
/// already-valid `logprobs`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<String>,
    pub rules: Vec<TableRuleSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRuleSpec {
    pub suffix: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<BTreeMap<String, f64>>,
}

impl TableRuleSpec {
    pub fn from_probs<'a>(
        suffix: impl Into<String>,
        probs: impl IntoIterator<Item = (&'a str, f64)>,
    ) -> Self {
        Self {
            suffix: suffix.into(),
            probs: Some(probs.into_iter().map(|(t, p)| (t.to_owned(), p)).collect()),
            logprobs: None,
        }
    }

    fn to_rule<F: Scalar>(&self) -> Result<TableRule<F>, BackendError> {
        let bad = |msg: String| BackendError::Config(format!("rule {:?}: {msg}", self.suffix));
        let dist = match (&self.probs, &self.logprobs) {
            (Some(probs), None) => {
                let mut weights = BTreeMap::new();
                for (token, &p) in probs {
                    if !(p > 0.0 && p.is_finite()) {
                        return Err(bad(format!("probability of {token:?} must be positive")));
                    }
                    weights.insert(token.clone(), F::of(p.ln()));
                }
                normalize(&weights).map_err(|e| bad(e.to_string()))?
            }
            (None, Some(logprobs)) => LogProbDist::new(
                logprobs
                    .iter()
                    .map(|(t, &v)| (t.clone(), F::of(v)))
                    .collect(),
                false,
            )
            .map_err(|e| bad(e.to_string()))?,
            _ => return Err(bad("exactly one of probs or logprobs is required".into())),
        };
        Ok(TableRule {
            suffix: self.suffix.clone(),
            dist,
        })
    }
}

impl<F: Scalar> TableBackend<F> {
    pub fn from_file(file: &TableFile) -> Result<Self, BackendError> {
        let rules = file
            .rules
            .iter()
            .map(TableRuleSpec::to_rule)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(build_toy_table(rules)?.with_eos(file.eos.clone()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Config(format!("cannot read table {}: {e}", path.display()))
        })?;
        let file: TableFile = serde_json::from_str(&text).map_err(|e| {
            BackendError::Config(format!("cannot parse table {}: {e}", path.display()))
        })?;
        Self::from_file(&file)
    }

    pub fn with_eos(mut self, eos: Option<String>) -> Self {
        self.eos = eos;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn rule_count(&self) -> usize {
        self.by_len.values().map(HashMap::len).sum()
    }

    fn lookup(&self, context: &str) -> &LogProbDist<F> {
        for (std::cmp::Reverse(len), bucket) in &self.by_len {
            let Some(start) = context.len().checked_sub(*len) else {
                continue;
            };
            if let Some(tail) = context.get(start..) {
                if let Some(dist) = bucket.get(tail) {
                    return dist;
                }
            }
        }
        unreachable!("the default rule matches every context")
    }
}

impl<F: Scalar> Backend<F> for TableBackend<F> {
    fn next_token_logprobs(&self, context: &str) -> Result<LogProbDist<F>, BackendError> {
        Ok(self.lookup(context).clone())
    }

    fn eos_token(&self) -> Option<String> {
        self.eos.clone()
    }

    fn describe(&self) -> String {
        format!(
            "table ({} rules, {} tokens)",
            self.rule_count(),
            self.vocab.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(suffix: &str, probs: &[(&str, f64)]) -> TableRule<f64> {
        TableRule {
            suffix: suffix.into(),
            dist: LogProbDist::from_probs(probs.iter().copied(), false).unwrap(),
        }
    }

    #[test]
    fn default_rule_applies_everywhere() {
        let table = build_toy_table([rule("", &[("x", 0.5), ("y", 0.5)])]).unwrap();
        for ctx in ["", "anything", "é"] {
            let d = table.next_token_logprobs(ctx).unwrap();
            assert_eq!(d.get("x"), d.get("y"));
        }
    }

    #[test]
    fn longest_suffix_wins() {
        let table = build_toy_table([
            rule("", &[("x", 0.5), ("y", 0.5)]),
            rule("green", &[("x", 0.9), ("y", 0.1)]),
            rule("Answer:", &[("a", 0.7), ("b", 0.2), ("c", 0.1)]),
            rule("sea green", &[("x", 0.2), ("y", 0.8)]),
        ])
        .unwrap();
        let d = table.next_token_logprobs("the grass is green").unwrap();
        assert_eq!(d.get("x"), Some(0.9f64.ln()));
        let d = table.next_token_logprobs("deep sea green").unwrap();
        assert_eq!(d.get("y"), Some(0.8f64.ln()));
        let d = table.next_token_logprobs("Question: ?\nAnswer:").unwrap();
        assert_eq!(d, rule("", &[("a", 0.7), ("b", 0.2), ("c", 0.1)]).dist);
        assert_eq!(
            table.next_token_logprobs("é green").unwrap(),
            table.next_token_logprobs("é green").unwrap()
        );
    }

    #[test]
    fn configuration_errors() {
        assert!(build_toy_table([rule("x", &[("a", 0.5), ("b", 0.5)])]).is_err());
        assert!(build_toy_table([
            rule("", &[("a", 0.5), ("b", 0.5)]),
            rule("ab", &[("a", 0.5), ("b", 0.5)]),
            rule("ab", &[("a", 0.1), ("b", 0.9)]),
        ])
        .is_err());
        assert!(build_toy_table([rule("", &[("a", 1.0)])]).is_err());
    }

    #[test]
    fn file_format() {
        let json = r#"{"eos":"</s>","rules":[
            {"suffix":"","probs":{"a":1,"b":3}},
            {"suffix":"z","logprobs":{"a":0.0}}]}"#;
        let file: TableFile = serde_json::from_str(json).unwrap();
        let table = TableBackend::<f64>::from_file(&file).unwrap();
        assert_eq!(table.eos_token().as_deref(), Some("</s>"));
        let d = table.next_token_logprobs("q").unwrap();
        assert!((d.get("b").unwrap().exp() - 0.75).abs() < 1e-12);

        let both: TableFile =
            serde_json::from_str(r#"{"rules":[{"suffix":"","probs":{"a":1},"logprobs":{"a":0}}]}"#)
                .unwrap();
        assert!(TableBackend::<f64>::from_file(&both).is_err());
        let zero: TableFile =
            serde_json::from_str(r#"{"rules":[{"suffix":"","probs":{"a":0,"b":1}}]}"#).unwrap();
        assert!(TableBackend::<f64>::from_file(&zero).is_err());
    }
}
