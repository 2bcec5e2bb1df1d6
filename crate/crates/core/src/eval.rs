//! Dataset ingestion, answer scoring and the shot-grid experiment runner.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::decoder::{decode_ced, decode_greedy, DecodeError, DecodeParams, Method};
use crate::fusion::{
    build_prompt_pair, question_type, select_example_indices, ContextExample, DescriptiveFeatures,
    FusionError, PromptTemplate, SelectionStrategy, DEFAULT_TOP_N, MAX_SHOTS,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pool,
    Test,
}

/// One question-answer instance with its precomputed visual description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
    pub split: Split,
    pub features: DescriptiveFeatures,
}

impl EvalRecord {
    pub fn resolved_question_type(&self) -> String {
        question_type(&self.question, self.question_type.as_deref())
    }

    /// The record as an in-context shot, answered with its first gold answer.
    pub fn to_example(&self) -> ContextExample {
        ContextExample {
            features: self.features.clone(),
            question: self.question.clone(),
            answer: self.answers[0].clone(),
            question_type: self.resolved_question_type(),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("field 'id' must be non-empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("field 'question' must be non-empty".into());
        }
        if self.answers.is_empty() {
            return Err("field 'answers' must hold at least one answer".into());
        }
        if self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err("field 'answers' contains a blank answer".into());
        }
        self.features
            .validate()
            .map_err(|e| format!("field 'features': {e}"))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?} (first seen on line {first})")]
    DuplicateId {
        line: usize,
        id: String,
        first: usize,
    },
    #[error("dataset holds no records")]
    NoRecords,
}

impl DatasetError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Line { line, .. } | Self::DuplicateId { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Outcome of checking every line of a dataset.
#[derive(Debug, Default)]
pub struct Validation {
    pub records: Vec<EvalRecord>,
    pub issues: Vec<DatasetError>,
}

impl Validation {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty() && !self.records.is_empty()
    }
}

/// Checks every non-blank JSONL line and collects all problems instead of
/// stopping at the first. Line numbers are 1-based.
pub fn validate_reader(reader: impl BufRead) -> Result<Validation, std::io::Error> {
    let mut out = Validation::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = match serde_json::from_str::<EvalRecord>(&line) {
            Ok(r) => r,
            Err(e) => {
                // serde_json reports its position as "line 1"; keep the column only.
                let text = e.to_string();
                let message = match text.rsplit_once(" at line ") {
                    Some((head, _)) => format!("{head} (column {})", e.column()),
                    None => text,
                };
                out.issues.push(DatasetError::Line {
                    line: line_no,
                    message,
                });
                continue;
            }
        };
        if let Err(message) = record.check() {
            out.issues.push(DatasetError::Line {
                line: line_no,
                message,
            });
            continue;
        }
        if let Some(&first) = seen.get(&record.id) {
            out.issues.push(DatasetError::DuplicateId {
                line: line_no,
                id: record.id,
                first,
            });
            continue;
        }
        seen.insert(record.id.clone(), line_no);
        out.records.push(record);
    }
    if out.records.is_empty() && out.issues.is_empty() {
        out.issues.push(DatasetError::NoRecords);
    }
    Ok(out)
}

pub fn validate_file(path: impl AsRef<Path>) -> Result<Validation, DatasetError> {
    let path = path.as_ref();
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    validate_reader(std::io::BufReader::new(file)).map_err(io)
}

/// Loads and validates a JSONL dataset, failing on the first bad line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, DatasetError> {
    let mut validation = validate_file(path)?;
    if !validation.issues.is_empty() {
        return Err(validation.issues.remove(0));
    }
    Ok(validation.records)
}

/// Lowercase, trim, collapse whitespace, drop terminal `.,!?` and a leading article.
pub fn normalize_answer(s: &str) -> String {
    let mut text = s
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    loop {
        let before = text.len();
        text = text
            .trim_end_matches(['.', ',', '!', '?'])
            .trim_end()
            .to_owned();
        if let Some((first, rest)) = text.split_once(' ') {
            if matches!(first, "a" | "an" | "the") {
                text = rest.to_owned();
            }
        }
        if text.len() == before {
            return text;
        }
    }
}

pub fn exact_match(pred: &str, answers: &[String]) -> f64 {
    let pred = normalize_answer(pred);
    if pred.is_empty() {
        return 0.0;
    }
    let hit = answers.iter().any(|a| normalize_answer(a) == pred);
    if hit {
        1.0
    } else {
        0.0
    }
}

/// `min(#annotators agreeing / 3, 1)`.
pub fn vqa_soft_accuracy(pred: &str, answers: &[String]) -> f64 {
    let pred = normalize_answer(pred);
    if pred.is_empty() {
        return 0.0;
    }
    let agree = answers
        .iter()
        .filter(|a| normalize_answer(a) == pred)
        .count();
    (agree as f64 / 3.0).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    VqaSoft,
    /// Soft accuracy for records with at least four gold answers, exact match otherwise.
    #[default]
    Auto,
}

impl Metric {
    pub fn score(self, pred: &str, answers: &[String]) -> f64 {
        match self {
            Metric::ExactMatch => exact_match(pred, answers),
            Metric::VqaSoft => vqa_soft_accuracy(pred, answers),
            Metric::Auto if answers.len() >= 4 => vqa_soft_accuracy(pred, answers),
            Metric::Auto => exact_match(pred, answers),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::ExactMatch => "exact_match",
            Metric::VqaSoft => "vqa_soft",
            Metric::Auto => "auto",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "exact_match" | "exact" => Ok(Metric::ExactMatch),
            "vqa_soft" | "vqa" => Ok(Metric::VqaSoft),
            "auto" => Ok(Metric::Auto),
            other => Err(format!(
                "unknown metric {other:?} (expected exact_match, vqa_soft or auto)"
            )),
        }
    }
}

/// Axes of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentGrid<F> {
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub params: DecodeParams<F>,
    pub top_n: usize,
    pub template: PromptTemplate,
    pub metric: Metric,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl<F: Scalar> Default for ExperimentGrid<F> {
    fn default() -> Self {
        Self {
            methods: vec![Method::Greedy, Method::Ced],
            shots: vec![0, 1, 3, 5],
            strategy: SelectionStrategy::QuestionType,
            seed: 0,
            params: DecodeParams::default(),
            top_n: DEFAULT_TOP_N,
            template: PromptTemplate::default(),
            metric: Metric::Auto,
            jobs: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("no test records")]
    NoTestRecords,
    #[error("record {id:?}: {source}")]
    Selection {
        id: String,
        #[source]
        source: FusionError,
    },
    #[error("record {id:?}: {source}")]
    Prompt {
        id: String,
        #[source]
        source: FusionError,
    },
    #[error("record {id:?}, {method} k={shots}: {message}")]
    Decode {
        id: String,
        method: Method,
        shots: usize,
        message: String,
        backend: Option<BackendError>,
    },
    #[error("cannot build worker pool: {0}")]
    Workers(String),
}

impl EvalError {
    pub fn is_backend_unreachable(&self) -> bool {
        matches!(self, EvalError::Decode { backend: Some(b), .. } if b.is_unreachable())
    }

    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            EvalError::Decode {
                backend: Some(_),
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub alpha: f64,
    pub top_n: usize,
    pub seed: u64,
    pub strategy: SelectionStrategy,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub metric: Metric,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub shots: usize,
    pub accuracy: f64,
    pub total_score: f64,
    pub records: usize,
}

/// CED minus greedy at `shots`, against greedy at the same shot count and at zero shots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub shots: usize,
    pub vs_same_shot_greedy: Option<f64>,
    pub vs_zero_shot_greedy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub method: Method,
    pub shots: usize,
    pub prediction: String,
    pub score: f64,
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub id: String,
    pub outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ConfigEcho,
    pub cells: Vec<Cell>,
    pub deltas: Vec<Delta>,
    pub records: Vec<RecordOutcome>,
}

impl ExperimentReport {
    pub fn accuracy(&self, method: Method, shots: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.shots == shots)
            .map(|c| c.accuracy)
    }

    /// Methods as rows, shot counts as columns, deltas underneath.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<28}", "method");
        for k in &self.config.shots {
            let _ = write!(out, "{:>10}", format!("k={k}"));
        }
        out.push('\n');
        for method in &self.config.methods {
            let _ = write!(out, "{:<28}", method.to_string());
            for &k in &self.config.shots {
                match self.accuracy(*method, k) {
                    Some(a) => {
                        let _ = write!(out, "{:>10.4}", a);
                    }
                    None => {
                        let _ = write!(out, "{:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        if !self.deltas.is_empty() {
            let rows: [(&str, DeltaPick); 2] = [
                ("ced - greedy (same k)", |d| d.vs_same_shot_greedy),
                ("ced - greedy (k=0)", |d| d.vs_zero_shot_greedy),
            ];
            for (label, pick) in rows {
                let _ = write!(out, "{label:<28}");
                for &k in &self.config.shots {
                    match self.deltas.iter().find(|d| d.shots == k).and_then(pick) {
                        Some(v) => {
                            let _ = write!(out, "{:>+10.4}", v);
                        }
                        None => {
                            let _ = write!(out, "{:>10}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "records={} alpha={} top_n={} strategy={} seed={} metric={}",
            self.records.len(),
            self.config.alpha,
            self.config.top_n,
            self.config.strategy,
            self.config.seed,
            self.config.metric
        );
        out
    }
}

type DeltaPick = fn(&Delta) -> Option<f64>;

/// Selection seed for the test record at `index` (its position in the test
/// split) under run seed `seed`. SplitMix64 finalizer.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_grid<F: Scalar>(grid: &ExperimentGrid<F>) -> Result<(), EvalError> {
    if grid.methods.is_empty() || grid.shots.is_empty() {
        return Err(EvalError::Grid(
            "methods and shots must be non-empty".into(),
        ));
    }
    let unique = |n: usize, distinct: usize| n == distinct;
    if !unique(
        grid.methods.len(),
        grid.methods.iter().collect::<HashSet<_>>().len(),
    ) || !unique(
        grid.shots.len(),
        grid.shots.iter().collect::<HashSet<_>>().len(),
    ) {
        return Err(EvalError::Grid("methods and shots must not repeat".into()));
    }
    if let Some(&k) = grid.shots.iter().find(|&&k| k > MAX_SHOTS) {
        return Err(EvalError::Grid(format!(
            "shot count {k} exceeds the maximum of {MAX_SHOTS}"
        )));
    }
    if grid.top_n == 0 {
        return Err(EvalError::Grid("top_n must be at least 1".into()));
    }
    if grid.jobs == Some(0) {
        return Err(EvalError::Grid("jobs must be at least 1".into()));
    }
    grid.params
        .validate()
        .map_err(|e| EvalError::Grid(e.to_string()))?;
    grid.template
        .validate()
        .map_err(|e| EvalError::Grid(e.to_string()))
}

fn evaluate_record<F: Scalar>(
    index: usize,
    record: &EvalRecord,
    pool: &[ContextExample],
    pool_ids: &[&str],
    backend: &dyn Backend<F>,
    grid: &ExperimentGrid<F>,
) -> Result<RecordOutcome, EvalError> {
    let qtype = record.resolved_question_type();
    let seed = record_seed(grid.seed, index as u64);
    let mut outcomes = Vec::with_capacity(grid.methods.len() * grid.shots.len());
    for &k in &grid.shots {
        let picked =
            select_example_indices(pool, &qtype, k, grid.strategy, seed).map_err(|source| {
                EvalError::Selection {
                    id: record.id.clone(),
                    source,
                }
            })?;
        let shots: Vec<ContextExample> = picked.iter().map(|&i| pool[i].clone()).collect();
        let prompts = build_prompt_pair(
            &shots,
            &record.features,
            &record.question,
            grid.top_n,
            &grid.template,
        )
        .map_err(|source| EvalError::Prompt {
            id: record.id.clone(),
            source,
        })?;
        let example_ids: Vec<String> = picked.iter().map(|&i| pool_ids[i].to_owned()).collect();

        for &method in &grid.methods {
            let result = match method {
                Method::Greedy => decode_greedy(backend, &prompts.with_examples, &grid.params),
                Method::Ced => decode_ced(backend, &prompts, &grid.params),
            };
            let trace = result.map_err(|e: DecodeError<F>| {
                let message = e.to_string();
                let backend = match e {
                    DecodeError::Backend { source, .. } => Some(source),
                    _ => None,
                };
                EvalError::Decode {
                    id: record.id.clone(),
                    method,
                    shots: k,
                    message,
                    backend,
                }
            })?;
            let prediction = trace.output.trim().to_owned();
            let score = grid.metric.score(&prediction, &record.answers);
            outcomes.push(Outcome {
                method,
                shots: k,
                prediction,
                score,
                examples: example_ids.clone(),
            });
        }
    }
    Ok(RecordOutcome {
        id: record.id.clone(),
        outcomes,
    })
}

/// Runs every (method, shot count) cell over the test split.
///
/// Shots come only from the pool split. Greedy decodes the example-prefixed
/// prompt (identical to the plain one at zero shots); CED decodes the pair.
/// Output order follows dataset order regardless of worker scheduling.
pub fn run_experiment<F: Scalar>(
    records: &[EvalRecord],
    backend: &dyn Backend<F>,
    grid: &ExperimentGrid<F>,
) -> Result<ExperimentReport, EvalError> {
    check_grid(grid)?;
    let tests: Vec<&EvalRecord> = records.iter().filter(|r| r.split == Split::Test).collect();
    if tests.is_empty() {
        return Err(EvalError::NoTestRecords);
    }
    let pool_records: Vec<&EvalRecord> =
        records.iter().filter(|r| r.split == Split::Pool).collect();
    let pool: Vec<ContextExample> = pool_records.iter().map(|r| r.to_example()).collect();
    let pool_ids: Vec<&str> = pool_records.iter().map(|r| r.id.as_str()).collect();

    let work = || -> Vec<Result<RecordOutcome, EvalError>> {
        use rayon::prelude::*;
        tests
            .par_iter()
            .enumerate()
            .map(|(i, r)| evaluate_record(i, r, &pool, &pool_ids, backend, grid))
            .collect()
    };
    let results = match grid.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| EvalError::Workers(e.to_string()))?
            .install(work),
        None => work(),
    };
    let outcomes = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut cells = Vec::new();
    for &method in &grid.methods {
        for &k in &grid.shots {
            let total: f64 = outcomes
                .iter()
                .flat_map(|r| &r.outcomes)
                .filter(|o| o.method == method && o.shots == k)
                .map(|o| o.score)
                .sum();
            cells.push(Cell {
                method,
                shots: k,
                accuracy: total / outcomes.len() as f64,
                total_score: total,
                records: outcomes.len(),
            });
        }
    }

    let mut report = ExperimentReport {
        config: ConfigEcho {
            alpha: grid.params.alpha.as_f64(),
            top_n: grid.top_n,
            seed: grid.seed,
            strategy: grid.strategy,
            methods: grid.methods.clone(),
            shots: grid.shots.clone(),
            metric: grid.metric,
            max_new_tokens: grid.params.max_new_tokens,
            stop_sequences: grid.params.stop_sequences.clone(),
            floor: grid.params.floor.as_f64(),
        },
        cells,
        deltas: Vec::new(),
        records: outcomes,
    };
    if grid.methods.contains(&Method::Ced) && grid.methods.contains(&Method::Greedy) {
        let zero = report.accuracy(Method::Greedy, 0);
        report.deltas = grid
            .shots
            .iter()
            .map(|&k| {
                let ced = report.accuracy(Method::Ced, k);
                Delta {
                    shots: k,
                    vs_same_shot_greedy: ced
                        .zip(report.accuracy(Method::Greedy, k))
                        .map(|(c, g)| c - g),
                    vs_zero_shot_greedy: ced.zip(zero).map(|(c, g)| c - g),
                }
            })
            .collect();
    }
    log::debug!("experiment finished over {} records", report.records.len());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answers(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn answer_normalization() {
        assert_eq!(normalize_answer("The Dog."), "dog");
        assert_eq!(normalize_answer("  two  "), "two");
        assert_eq!(normalize_answer("blue"), "blue");
        assert_eq!(normalize_answer("a  red\tball!?"), "red ball");
        assert_eq!(normalize_answer("An apple ."), "apple");
        assert_eq!(normalize_answer("the"), "the");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("..."), "");
    }

    #[test]
    fn exact_matching() {
        assert_eq!(exact_match("The dog", &answers(&["dog"])), 1.0);
        assert_eq!(exact_match("cat", &answers(&["dog", "puppy"])), 0.0);
        assert_eq!(exact_match("", &answers(&["dog"])), 0.0);
        assert_eq!(exact_match("Puppy!", &answers(&["dog", "puppy"])), 1.0);
    }

    #[test]
    fn soft_accuracy() {
        let mut gold = answers(&["dog", "dog", "dog"]);
        gold.extend(answers(&["cat"; 7]));
        assert_eq!(vqa_soft_accuracy("dog", &gold), 1.0);
        let mut one = answers(&["dog"]);
        one.extend(answers(&["cat"; 9]));
        assert!((vqa_soft_accuracy("dog", &one) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(vqa_soft_accuracy("bird", &one), 0.0);
        assert_eq!(
            Metric::Auto.score("dog", &one),
            vqa_soft_accuracy("dog", &one)
        );
        assert_eq!(Metric::Auto.score("dog", &answers(&["dog"])), 1.0);
    }

    #[test]
    fn reads_jsonl() {
        let text = concat!(
            r#"{"id":"a","question":"q?","answers":["x"],"split":"pool","features":{"tags":["t"]}}"#,
            "\n\n",
            r#"{"id":"b","question":"q?","answers":["x"],"question_type":"qt","split":"test","features":{"captions":["c"]}}"#,
            "\n",
            r#"{"id":"c","question":"q?","answers":["y"],"split":"test","features":{"attributes":["a"]}}"#,
            "\n"
        );
        let v = validate_reader(text.as_bytes()).unwrap();
        assert!(v.is_valid());
        assert_eq!(v.records.len(), 3);
        assert_eq!(v.records[1].resolved_question_type(), "qt");
    }

    #[test]
    fn reports_bad_lines() {
        let good = r#"{"id":"a","question":"q?","answers":["x"],"split":"pool","features":{"tags":["t"]}}"#;
        let text = format!(
            "{good}\n{}\n{good}\n{}\n",
            r#"{"id":"b","question":"q?","answers":[],"split":"test","features":{"tags":["t"]}}"#,
            "{broken"
        );
        let v = validate_reader(text.as_bytes()).unwrap();
        let lines: Vec<_> = v.issues.iter().map(|e| e.line().unwrap()).collect();
        assert_eq!(lines, [2, 3, 4]);
        assert!(
            matches!(&v.issues[1], DatasetError::DuplicateId { id, first: 1, .. } if id == "a")
        );
        assert!(v.issues[0].to_string().contains("answers"));

        let empty = validate_reader("\n\n".as_bytes()).unwrap();
        assert!(matches!(empty.issues[..], [DatasetError::NoRecords]));
    }

    #[test]
    fn seeds_spread() {
        assert_ne!(record_seed(0, 0), record_seed(0, 1));
        assert_eq!(record_seed(7, 3), record_seed(7, 3));
    }
}
