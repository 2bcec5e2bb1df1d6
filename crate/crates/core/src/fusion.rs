//! Text fusion: visual features and in-context shots rendered into the two
//! conditioning prompts, plus shot selection.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Items kept per feature list when nothing else is configured.
pub const DEFAULT_TOP_N: usize = 5;

/// Upper bound on shots per prompt.
pub const MAX_SHOTS: usize = 8;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("top-n must be at least 1")]
    ZeroTopN,
    #[error(
        "descriptive features are empty: at least one of tags, attributes, captions is required"
    )]
    NoFeatures,
    #[error("{field} contains a blank entry")]
    BlankFeature { field: &'static str },
    #[error("example answer is empty")]
    EmptyAnswer,
    #[error("{got} shots requested, at most {max} are supported")]
    TooManyShots { got: usize, max: usize },
    #[error("requested {k} examples but the pool holds only {pool}")]
    PoolTooSmall { k: usize, pool: usize },
    #[error("template {part} is missing the {placeholder} placeholder")]
    Template {
        part: &'static str,
        placeholder: &'static str,
    },
    #[error("cannot read template {path}: {source}")]
    TemplateIo {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse template {path}: {message}")]
    TemplateParse { path: String, message: String },
}

/// Tags, attributes and captions describing one image or video, best first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptiveFeatures {
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub captions: Vec<String>,
}

impl DescriptiveFeatures {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.tags.is_empty() && self.attributes.is_empty() && self.captions.is_empty() {
            return Err(FusionError::NoFeatures);
        }
        for (field, list) in self.lists() {
            if list.iter().any(|s| s.trim().is_empty()) {
                return Err(FusionError::BlankFeature { field });
            }
        }
        Ok(())
    }

    fn lists(&self) -> [(&'static str, &[String]); 3] {
        [
            ("tags", &self.tags),
            ("attributes", &self.attributes),
            ("captions", &self.captions),
        ]
    }
}

/// One labeled shot: features plus its question/answer pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextExample {
    pub features: DescriptiveFeatures,
    pub question: String,
    pub answer: String,
    pub question_type: String,
}

/// Fixed text around the feature blocks. `{q}` and `{a}` are substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub header: String,
    pub example: String,
    pub query: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            header: "Answer the question using the visual description.\n\n".into(),
            example: "Question: {q}\nAnswer: {a}\n\n".into(),
            query: "Question: {q}\nAnswer:".into(),
        }
    }
}

impl PromptTemplate {
    /// Reads a TOML file with `header`, `example` and `query` string keys.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, FusionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FusionError::TemplateIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            FusionError::TemplateParse { message, .. } => FusionError::TemplateParse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, FusionError> {
        let template: Self = toml::from_str(text).map_err(|e| FusionError::TemplateParse {
            path: String::new(),
            message: e.to_string(),
        })?;
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let required = [
            ("example", &self.example, "{q}"),
            ("example", &self.example, "{a}"),
            ("query", &self.query, "{q}"),
        ];
        for (part, text, placeholder) in required {
            if !text.contains(placeholder) {
                return Err(FusionError::Template { part, placeholder });
            }
        }
        Ok(())
    }

    pub fn render_example_block(&self, question: &str, answer: &str) -> String {
        substitute(&self.example, question, answer)
    }

    pub fn render_query(&self, question: &str) -> String {
        substitute(&self.query, question, "")
    }
}

// Single pass, so placeholder-like text inside a question is left alone.
fn substitute(template: &str, question: &str, answer: &str) -> String {
    let mut out = String::with_capacity(template.len() + question.len() + answer.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{q}") {
            out.push_str(question);
            rest = after;
        } else if let Some(after) = tail.strip_prefix("{a}") {
            out.push_str(answer);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

/// `Tags: ...\nAttributes: ...\nCaptions: ...\n` over the first `n` items of
/// each list. Empty lists drop their line.
pub fn render_features(features: &DescriptiveFeatures, n: usize) -> Result<String, FusionError> {
    if n == 0 {
        return Err(FusionError::ZeroTopN);
    }
    features.validate()?;
    let mut out = String::new();
    for (label, list) in [
        ("Tags", &features.tags),
        ("Attributes", &features.attributes),
        ("Captions", &features.captions),
    ] {
        if list.is_empty() {
            continue;
        }
        out.push_str(label);
        out.push_str(": ");
        let items: Vec<&str> = list.iter().take(n).map(|s| s.trim()).collect();
        out.push_str(&items.join(", "));
        out.push('\n');
    }
    Ok(out)
}

pub fn render_example(
    example: &ContextExample,
    n: usize,
    template: &PromptTemplate,
) -> Result<String, FusionError> {
    let answer = example.answer.trim();
    if answer.is_empty() {
        return Err(FusionError::EmptyAnswer);
    }
    let mut out = render_features(&example.features, n)?;
    out.push_str(&template.render_example_block(example.question.trim(), answer));
    Ok(out)
}

/// The two conditioning contexts: `header + body` and `header + shots + body`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub plain: String,
    pub with_examples: String,
    header_len: usize,
    examples_len: usize,
}

impl PromptPair {
    pub fn header(&self) -> &str {
        &self.plain[..self.header_len]
    }

    /// Features and question of the record being answered.
    pub fn body(&self) -> &str {
        &self.plain[self.header_len..]
    }

    pub fn example_block(&self) -> &str {
        &self.with_examples[self.header_len..self.header_len + self.examples_len]
    }

    pub fn has_examples(&self) -> bool {
        self.examples_len > 0
    }

    /// Removes the example block from a context that extends `with_examples`.
    pub fn strip_examples<'a>(&self, context: &'a str) -> Option<(&'a str, &'a str)> {
        let header = context.get(..self.header_len)?;
        let rest = context.get(self.header_len + self.examples_len..)?;
        (header == self.header()).then_some((header, rest))
    }
}

impl fmt::Display for PromptPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "--- plain ---\n{}", self.plain)?;
        write!(f, "--- with examples ---\n{}", self.with_examples)
    }
}

pub fn build_prompt_pair(
    examples: &[ContextExample],
    features: &DescriptiveFeatures,
    question: &str,
    n: usize,
    template: &PromptTemplate,
) -> Result<PromptPair, FusionError> {
    if examples.len() > MAX_SHOTS {
        return Err(FusionError::TooManyShots {
            got: examples.len(),
            max: MAX_SHOTS,
        });
    }
    let mut body = render_features(features, n)?;
    body.push_str(&template.render_query(question.trim()));

    let mut shots = String::new();
    for example in examples {
        shots.push_str(&render_example(example, n, template)?);
    }

    let header = &template.header;
    Ok(PromptPair {
        plain: format!("{header}{body}"),
        with_examples: format!("{header}{shots}{body}"),
        header_len: header.len(),
        examples_len: shots.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    QuestionType,
    Random,
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::QuestionType => "question_type",
            Self::Random => "random",
        })
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "question_type" | "question-type" | "qtype" => Ok(Self::QuestionType),
            "random" => Ok(Self::Random),
            other => Err(format!(
                "unknown strategy {other:?} (expected question_type or random)"
            )),
        }
    }
}

/// Positions in `pool` of the chosen shots, in prompt order.
///
/// `QuestionType` takes the first `k` entries of the matching type and fills
/// any shortfall with a seeded draw from the remaining entries. `Random`
/// draws `k` distinct entries with the seed.
pub fn select_example_indices(
    pool: &[ContextExample],
    query_type: &str,
    k: usize,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<usize>, FusionError> {
    if k > pool.len() {
        return Err(FusionError::PoolTooSmall {
            k,
            pool: pool.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        SelectionStrategy::Random => Ok(index::sample(&mut rng, pool.len(), k).into_vec()),
        SelectionStrategy::QuestionType => {
            let mut chosen: Vec<usize> = pool
                .iter()
                .enumerate()
                .filter(|(_, e)| e.question_type == query_type)
                .map(|(i, _)| i)
                .take(k)
                .collect();
            if chosen.len() < k {
                let taken: HashSet<usize> = chosen.iter().copied().collect();
                let rest: Vec<usize> = (0..pool.len()).filter(|i| !taken.contains(i)).collect();
                let extra = index::sample(&mut rng, rest.len(), k - chosen.len());
                chosen.extend(extra.into_iter().map(|i| rest[i]));
            }
            Ok(chosen)
        }
    }
}

pub fn select_examples(
    pool: &[ContextExample],
    query_type: &str,
    k: usize,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<ContextExample>, FusionError> {
    Ok(select_example_indices(pool, query_type, k, strategy, seed)?
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// The dataset-provided type when present, else the lowercased first two words.
pub fn question_type(question: &str, explicit: Option<&str>) -> String {
    if let Some(t) = explicit.map(str::trim).filter(|t| !t.is_empty()) {
        return t.to_owned();
    }
    question
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .take(2)
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
