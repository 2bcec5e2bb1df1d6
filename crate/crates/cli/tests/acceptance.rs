//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ced_cli::commands::{cmd_run, cmd_validate, FIXTURE_DATASET, FIXTURE_TABLE};
use ced_cli::RunConfig;
use ced_core::{
    adaptive_head, build_prompt_pair, ced_scores, decode_ced, decode_greedy, load_dataset,
    render_features, ContextExample, DecodeParams, DescriptiveFeatures, LogProbDist, Method,
    PromptTemplate, SelectionStrategy, Split, TableBackend,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn ensure(cond: bool, message: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message.into())
    }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<(String, f64)> {
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights
        .into_iter()
        .enumerate()
        .map(|(i, w)| (format!("t{i:02}"), w / total))
        .collect()
}

fn dist(pairs: &[(String, f64)]) -> LogProbDist {
    LogProbDist::from_probs(pairs.iter().cloned(), false).unwrap()
}

/// Enumerates the vocabulary in probability space: plausibility threshold,
/// probability ratio, then ties by larger p~ and smaller token.
fn brute_force(pt: &[(String, f64)], p: &[(String, f64)], alpha: f64) -> String {
    let max = pt.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    let mut best: Option<(f64, f64, &str)> = None;
    for ((token, a), (_, b)) in pt.iter().zip(p) {
        if *a < alpha * max {
            continue;
        }
        let ratio = a / b;
        let wins = match best {
            None => true,
            Some((r, w, t)) => {
                ratio > r || (ratio == r && (*a > w || (*a == w && token.as_str() < t)))
            }
        };
        if wins {
            best = Some((ratio, *a, token));
        }
    }
    best.expect("head is never empty").2.to_owned()
}

fn oracle_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let pt = random_probs(&mut rng, n);
        let p = random_probs(&mut rng, n);
        let alpha = rng.random_range(0.0..=1.0);
        let got = ced_scores(&dist(&pt), &dist(&p), alpha)
            .map_err(|e| e.to_string())?
            .selected;
        if got != brute_force(&pt, &p, alpha) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(
        mismatches == 0,
        format!("{mismatches}/1000 selections differ"),
    )?;
    ensure(
        elapsed < Duration::from_secs(5),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!("1000/1000 triples agree in {elapsed:.2?}"))
}

fn head_properties() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let n = rng.random_range(1..=64);
        let pt = random_probs(&mut rng, n);
        let d = dist(&pt);
        let mut alphas: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..=1.0)).collect();
        alphas.extend([0.0, 1.0]);
        alphas.sort_by(f64::total_cmp);
        let heads: Vec<BTreeSet<String>> = alphas
            .iter()
            .map(|&a| adaptive_head(&d, a).unwrap())
            .collect();
        ensure(
            heads.iter().all(|h| !h.is_empty()),
            format!("case {case}: empty head"),
        )?;
        ensure(
            heads.windows(2).all(|w| w[1].is_subset(&w[0])),
            format!("case {case}: head grows with alpha"),
        )?;
        ensure(
            heads[0].len() == n,
            format!("case {case}: alpha=0 drops tokens"),
        )?;
        let max = pt.iter().map(|(_, w)| *w).fold(0.0, f64::max);
        let argmaxes: Vec<&String> = pt
            .iter()
            .filter(|(_, w)| *w == max)
            .map(|(t, _)| t)
            .collect();
        if argmaxes.len() == 1 {
            let expected: BTreeSet<String> = [argmaxes[0].clone()].into();
            ensure(
                heads.last().unwrap() == &expected,
                format!("case {case}: alpha=1 head is not the argmax"),
            )?;
        }
    }
    Ok("non-empty, monotone in alpha, alpha=1 keeps the argmax on 1000 distributions".into())
}

fn zero_shot_equivalence() -> Result<String, String> {
    let records = load_dataset(fixtures().join(FIXTURE_DATASET)).map_err(|e| e.to_string())?;
    let table = TableBackend::load(fixtures().join(FIXTURE_TABLE)).map_err(|e| e.to_string())?;
    let params = DecodeParams::default();
    let template = PromptTemplate::default();
    let mut checked = 0;
    for record in records.iter().filter(|r| r.split == Split::Test) {
        let pair = build_prompt_pair(&[], &record.features, &record.question, 5, &template)
            .map_err(|e| e.to_string())?;
        let ced = decode_ced(&table, &pair, &params).map_err(|e| e.to_string())?;
        let greedy = decode_greedy(&table, &pair.plain, &params).map_err(|e| e.to_string())?;
        ensure(
            ced.output == greedy.output,
            format!("{}: {:?} vs {:?}", record.id, ced.output, greedy.output),
        )?;
        checked += 1;
    }
    ensure(
        checked == 200,
        format!("expected 200 test records, found {checked}"),
    )?;
    Ok("ced(k=0) == greedy on all 200 records".into())
}

fn fixture_config(out: Option<PathBuf>) -> RunConfig {
    RunConfig {
        dataset: Some(fixtures().join(FIXTURE_DATASET)),
        backend: Some(format!(
            "table:{}",
            fixtures().join(FIXTURE_TABLE).display()
        )),
        out,
        ..RunConfig::default()
    }
}

fn directional() -> Result<String, String> {
    let run =
        cmd_run(&fixture_config(None), false, &mut std::io::sink()).map_err(|e| e.to_string())?;
    let acc = |m, k| run.report.accuracy(m, k).expect("cell present");
    let mut parts = Vec::new();
    for k in [1, 3, 5] {
        let diff = acc(Method::Ced, k) - acc(Method::Greedy, k);
        ensure(diff >= 0.0, format!("k={k}: ced - greedy = {diff}"))?;
        parts.push(format!("k={k} {diff:+.2}"));
    }
    let (c3, c0) = (acc(Method::Ced, 3), acc(Method::Ced, 0));
    ensure(c3 > c0, format!("ced(3) = {c3} not above ced(0) = {c0}"))?;
    Ok(format!(
        "ced - greedy: {}; ced(3) {c3:.2} > ced(0) {c0:.2}",
        parts.join(", ")
    ))
}

fn features(tags: &[&str], attributes: &[&str], captions: &[&str]) -> DescriptiveFeatures {
    let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    DescriptiveFeatures {
        tags: own(tags),
        attributes: own(attributes),
        captions: own(captions),
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &['a', 'b', 'Q', ' ', ':', '{', '}', 'é', '?', '\n', '7'];
    let len = rng.random_range(1..12);
    let s: String = (0..len)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
        .collect();
    if s.trim().is_empty() {
        "x".into()
    } else {
        s
    }
}

fn random_features(rng: &mut ChaCha8Rng) -> DescriptiveFeatures {
    let list = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.random_range(0..7))
            .map(|_| random_text(rng))
            .collect()
    };
    let mut f = DescriptiveFeatures {
        tags: list(rng),
        attributes: list(rng),
        captions: list(rng),
    };
    if f.tags.is_empty() && f.attributes.is_empty() && f.captions.is_empty() {
        f.captions.push(random_text(rng));
    }
    f
}

fn prompt_bytes() -> Result<String, String> {
    let f = features(&["dog", "ball"], &["brown dog"], &["a dog plays"]);
    let vectors = [
        (
            f.clone(),
            5,
            "Tags: dog, ball\nAttributes: brown dog\nCaptions: a dog plays\n",
        ),
        (
            f,
            1,
            "Tags: dog\nAttributes: brown dog\nCaptions: a dog plays\n",
        ),
        (
            features(&[], &["x"], &["y"]),
            5,
            "Attributes: x\nCaptions: y\n",
        ),
    ];
    for (features, n, expected) in &vectors {
        let got = render_features(features, *n).map_err(|e| e.to_string())?;
        ensure(got == *expected, format!("{got:?} != {expected:?}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let template = PromptTemplate::default();
    for case in 0..1000 {
        let shots: Vec<ContextExample> = (0..rng.random_range(0..=8))
            .map(|_| ContextExample {
                features: random_features(&mut rng),
                question: random_text(&mut rng),
                answer: random_text(&mut rng),
                question_type: "q".into(),
            })
            .collect();
        let query = random_features(&mut rng);
        let question = random_text(&mut rng);
        let n = rng.random_range(1..8);
        let pair = build_prompt_pair(&shots, &query, &question, n, &template)
            .map_err(|e| format!("case {case}: {e}"))?;
        let body = format!(
            "{}{}",
            render_features(&query, n).unwrap(),
            template.render_query(question.trim())
        );
        ensure(
            pair.plain == format!("{}{body}", template.header)
                && pair.with_examples.ends_with(&body)
                && pair.with_examples.starts_with(&template.header)
                && pair.with_examples
                    == format!("{}{}{body}", template.header, pair.example_block())
                && (!shots.is_empty() || pair.plain == pair.with_examples),
            format!("case {case}: suffix invariant broken"),
        )?;
    }
    Ok("3 feature vectors byte-exact; suffix invariant on 1000 random inputs".into())
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        let config = RunConfig {
            strategy: SelectionStrategy::Random,
            seed: 17,
            ..fixture_config(Some(out.clone()))
        };
        cmd_run(&config, false, &mut std::io::sink()).map_err(|e| e.to_string())?;
        let table =
            std::fs::read(ced_cli::commands::table_path(&out)).map_err(|e| e.to_string())?;
        reports.push((std::fs::read(&out).map_err(|e| e.to_string())?, table));
    }
    ensure(reports[0] == reports[1], "reports differ between runs")?;
    Ok(format!(
        "two runs wrote identical {}-byte reports",
        reports[0].0.len()
    ))
}

const MALFORMED: [(&str, usize); 10] = [
    ("answers_not_list.jsonl", 1),
    ("blank_caption.jsonl", 7),
    ("blank_question.jsonl", 2),
    ("duplicate_id.jsonl", 4),
    ("empty_answers.jsonl", 5),
    ("missing_answers.jsonl", 2),
    ("not_an_object.jsonl", 5),
    ("tags_not_list.jsonl", 3),
    ("truncated_json.jsonl", 3),
    ("unknown_split.jsonl", 6),
];

fn dataset_robustness() -> Result<String, String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/malformed");
    for (name, line) in MALFORMED {
        let mut out = Vec::new();
        let valid = cmd_validate(&dir.join(name), &mut out).map_err(|e| e.to_string())?;
        let text = String::from_utf8(out).unwrap();
        let reported: Vec<&str> = text.lines().filter(|l| l.starts_with("line ")).collect();
        ensure(!valid, format!("{name} accepted"))?;
        ensure(
            reported.len() == 1 && reported[0].starts_with(&format!("line {line}:")),
            format!("{name}: expected line {line}, got {reported:?}"),
        )?;
    }
    Ok("10/10 malformed files rejected at the right line".into())
}

fn main() {
    let checks: [(&str, Check); 7] = [
        ("oracle equivalence", oracle_equivalence),
        ("head properties", head_properties),
        ("zero-shot equivalence", zero_shot_equivalence),
        ("directional synthetic reproduction", directional),
        ("prompt bit-exactness", prompt_bytes),
        ("determinism", determinism),
        ("dataset robustness", dataset_robustness),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {message}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
