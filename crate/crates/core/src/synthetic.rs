//! Deterministic desk-scale fixture: a VQA-style dataset plus a rule table
//! in which example-prefixed prompts shift mass toward the gold answer.
//!
//! Every test record belongs to one of four behaviours, cycling by index:
//!
//! | share | plain context      | after a shot of the same type |
//! |-------|--------------------|-------------------------------|
//! | 6/10  | distractor leads   | distractor still leads, gold gains |
//! | 2/10  | distractor leads   | gold leads                    |
//! | 1/10  | distractor leads   | unchanged                     |
//! | 1/10  | gold leads         | gold leads further            |
//!
//! A same-type shot is recognised by the table as the text
//! `\nAnswer: <pool answer>\n\n` directly in front of the record's own
//! features and question, which never occurs in the plain prompt.

use crate::backend::{TableFile, TableRuleSpec};
use crate::eval::{EvalRecord, Split};
use crate::fusion::{render_features, DescriptiveFeatures, FusionError, PromptTemplate};

const KINDS: [(&str, &str, [&str; 6]); 4] = [
    (
        "what color",
        "What color is the main object in scene {}?",
        ["red", "blue", "green", "yellow", "white", "black"],
    ),
    (
        "how many",
        "How many people are in scene {}?",
        ["two", "three", "four", "five", "one", "six"],
    ),
    (
        "what animal",
        "What animal is shown in scene {}?",
        ["dog", "cat", "horse", "bird", "cow", "sheep"],
    ),
    (
        "what sport",
        "What sport is being played in scene {}?",
        ["tennis", "soccer", "baseball", "skiing", "surfing", "golf"],
    ),
];

const SCENE_TAGS: [&str; 6] = ["street", "park", "kitchen", "beach", "field", "room"];
const SCENE_ATTRS: [&str; 4] = ["bright", "crowded", "quiet", "outdoor"];

/// Number of pool records per question type.
pub const POOL_PER_TYPE: usize = 6;

#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    pub records: Vec<EvalRecord>,
    pub table: TableFile,
}

impl SyntheticFixture {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn table_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.table).expect("table serializes");
        text.push('\n');
        text
    }
}

fn features(scene: &str, salt: usize) -> DescriptiveFeatures {
    DescriptiveFeatures {
        tags: vec![
            scene.to_owned(),
            SCENE_TAGS[salt % SCENE_TAGS.len()].to_owned(),
        ],
        attributes: vec![SCENE_ATTRS[salt % SCENE_ATTRS.len()].to_owned()],
        captions: vec![format!("a photo of {scene}")],
    }
}

fn question(kind: usize, scene: &str) -> String {
    KINDS[kind].1.replace("{}", scene)
}

/// Builds `test_count` test records, a pool of [`POOL_PER_TYPE`] records per
/// type, and the matching table for the given template and top-n.
pub fn synthetic_fixture(
    test_count: usize,
    template: &PromptTemplate,
    top_n: usize,
) -> Result<SyntheticFixture, FusionError> {
    let mut records = Vec::new();
    for (kind, (qtype, _, answers)) in KINDS.iter().enumerate() {
        for (i, answer) in answers.iter().enumerate().take(POOL_PER_TYPE) {
            let scene = format!("P{kind}-{i}");
            records.push(EvalRecord {
                id: format!("pool-{kind}-{i}"),
                question: question(kind, &scene),
                answers: vec![(*answer).to_owned()],
                question_type: Some((*qtype).to_owned()),
                split: Split::Pool,
                features: features(&scene, kind + i),
            });
        }
    }

    let mut vocab: Vec<&str> = KINDS.iter().flat_map(|k| k.2).collect();
    vocab.sort_unstable();
    let mut rules = vec![TableRuleSpec::from_probs(
        "",
        [("\n", 0.5), (" unknown", 0.5)],
    )];
    for word in &vocab {
        let token = format!(" {word}");
        rules.push(TableRuleSpec::from_probs(
            token.clone(),
            [("\n", 0.95), (token.as_str(), 0.05)],
        ));
    }

    for t in 0..test_count {
        let kind = t % KINDS.len();
        let (qtype, _, answers) = KINDS[kind];
        let round = t / KINDS.len();
        let gold = format!(" {}", answers[round % answers.len()]);
        let distractor = format!(" {}", answers[(round + 1) % answers.len()]);
        let other = format!(" {}", answers[(round + 2) % answers.len()]);
        let scene = format!("T{t}");
        let record = EvalRecord {
            id: format!("test-{t:04}"),
            question: question(kind, &scene),
            answers: vec![gold.trim().to_owned()],
            question_type: Some(qtype.to_owned()),
            split: Split::Test,
            features: features(&scene, t),
        };

        let probs = |g: f64, d: f64, o: f64| {
            [
                (gold.as_str(), g),
                (distractor.as_str(), d),
                (other.as_str(), o),
            ]
        };
        let (plain, shifted) = match t % 10 {
            0..=5 => (probs(0.3, 0.6, 0.1), probs(0.4, 0.5, 0.1)),
            6 | 7 => (probs(0.3, 0.6, 0.1), probs(0.6, 0.3, 0.1)),
            8 => (probs(0.3, 0.6, 0.1), probs(0.3, 0.6, 0.1)),
            _ => (probs(0.6, 0.3, 0.1), probs(0.7, 0.2, 0.1)),
        };
        let query = template.render_query(&record.question);
        let body = format!("{}{}", render_features(&record.features, top_n)?, query);
        rules.push(TableRuleSpec::from_probs(query, plain));
        for shot_answer in answers.iter().take(POOL_PER_TYPE) {
            // Text that follows the question inside any shot answered `shot_answer`.
            let block = template.render_example_block("\u{0}", shot_answer);
            let tail = block.rsplit('\u{0}').next().unwrap_or_default();
            rules.push(TableRuleSpec::from_probs(format!("{tail}{body}"), shifted));
        }
        records.push(record);
    }

    Ok(SyntheticFixture {
        records,
        table: TableFile { eos: None, rules },
    })
}
