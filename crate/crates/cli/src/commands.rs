use std::io::Write;
use std::path::{Path, PathBuf};

use ced_core::backend::{select_backend_url, Backend};
use ced_core::eval::record_seed;
use ced_core::fusion::select_example_indices;
use ced_core::synthetic::synthetic_fixture;
use ced_core::{
    build_prompt_pair, decode_ced, decode_greedy, load_dataset, run_experiment, validate_file,
    BackendDescriptor, DatasetError, DecodeTrace, EvalRecord, ExperimentReport, Method,
    PromptTemplate, RemoteBackend, Split,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

/// What `run` writes: the resolved config next to the results, so a report
/// can be reproduced from itself plus the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_config: RunConfig,
    pub report: ExperimentReport,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Failed(format!("cannot write output: {e}")))
}

/// Opens the configured backend. Remote endpoints must answer a health check.
pub fn open_backend(config: &RunConfig) -> Result<Box<dyn Backend<f64>>, CliError> {
    let descriptor = config.backend_descriptor()?;
    let backend_err = |e: ced_core::BackendError| CliError::Backend(format!("{descriptor}: {e}"));
    match &descriptor {
        BackendDescriptor::Remote { endpoint, options } => {
            let endpoint = select_backend_url(endpoint);
            let remote = RemoteBackend::new(&endpoint, options.clone()).map_err(backend_err)?;
            let health = remote.health().map_err(backend_err)?;
            log::info!("backend {endpoint} serves model {}", health.model);
            Ok(Box::new(remote))
        }
        _ => descriptor.open().map_err(backend_err),
    }
}

fn load_records(config: &RunConfig) -> Result<Vec<EvalRecord>, CliError> {
    let path = config.dataset_path()?;
    let records = load_dataset(path).map_err(|e| match e {
        DatasetError::Io { .. } => CliError::Dataset(e.to_string()),
        e => CliError::Dataset(format!("{}: {e}", path.display())),
    })?;
    log::info!("loaded {} records from {}", records.len(), path.display());
    Ok(records)
}

/// Text table path that sits next to the JSON report.
pub fn table_path(out: &Path) -> PathBuf {
    out.with_extension("txt")
}

/// Runs the full grid. Writes the JSON report to `config.out` (plus a text
/// table beside it) and prints the table, or the JSON with `json`.
pub fn cmd_run(
    config: &RunConfig,
    json: bool,
    stdout: &mut dyn Write,
) -> Result<RunReport, CliError> {
    let grid = config.grid()?;
    let records = load_records(config)?;
    let backend = open_backend(config)?;
    let report = run_experiment(&records, backend.as_ref(), &grid)?;
    let run = RunReport {
        run_config: config.echo(),
        report,
    };
    let text = run.to_json();
    let table = run.report.to_table();
    if let Some(out) = &config.out {
        let write = |path: &Path, body: &str| {
            std::fs::write(path, body)
                .map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
        };
        write(out, &text)?;
        write(&table_path(out), &table)?;
        log::info!("wrote {}", out.display());
    }
    write_out(stdout, if json { &text } else { &table })?;
    Ok(run)
}

/// Decodes one test record with the shots a full run would pick for it.
pub fn cmd_decode_one(
    config: &RunConfig,
    id: &str,
    k: usize,
    method: Method,
    json: bool,
    stdout: &mut dyn Write,
) -> Result<DecodeTrace, CliError> {
    let grid = config.grid()?;
    let records = load_records(config)?;
    let tests: Vec<&EvalRecord> = records.iter().filter(|r| r.split == Split::Test).collect();
    let Some(index) = tests.iter().position(|r| r.id == id) else {
        let known = records.iter().any(|r| r.id == id);
        return Err(CliError::Dataset(if known {
            format!("record {id:?} is in the pool split; only test records can be decoded")
        } else {
            format!("unknown record id {id:?}")
        }));
    };
    let record = tests[index];
    let pool_records: Vec<&EvalRecord> =
        records.iter().filter(|r| r.split == Split::Pool).collect();
    let pool: Vec<_> = pool_records.iter().map(|r| r.to_example()).collect();
    let picked = select_example_indices(
        &pool,
        &record.resolved_question_type(),
        k,
        grid.strategy,
        record_seed(grid.seed, index as u64),
    )
    .map_err(|e| CliError::Failed(format!("record {id:?}: {e}")))?;
    let shots: Vec<_> = picked.iter().map(|&i| pool[i].clone()).collect();
    let pair = build_prompt_pair(
        &shots,
        &record.features,
        &record.question,
        grid.top_n,
        &grid.template,
    )
    .map_err(|e| CliError::Failed(format!("record {id:?}: {e}")))?;

    let backend = open_backend(config)?;
    let result = match method {
        Method::Greedy => decode_greedy(backend.as_ref(), &pair.with_examples, &grid.params),
        Method::Ced => decode_ced(backend.as_ref(), &pair, &grid.params),
    };
    let trace = result.map_err(|e| match e.backend_error() {
        Some(_) => CliError::Backend(e.to_string()),
        None => CliError::Failed(e.to_string()),
    })?;

    if json {
        write_out(stdout, &format!("{}\n", trace.to_json()))?;
        return Ok(trace);
    }
    let mut text = format!("record {id} ({method}, k={k})\n");
    let ids: Vec<&str> = picked
        .iter()
        .map(|&i| pool_records[i].id.as_str())
        .collect();
    text.push_str(&format!(
        "examples: [{}]\n{pair}\n--- steps ---\n",
        ids.join(", ")
    ));
    for (i, step) in trace.steps.iter().enumerate() {
        let head: Vec<String> = step.head.iter().map(|t| format!("{t:?}")).collect();
        text.push_str(&format!(
            "step {i}: selected {:?}\n  head: [{}]\n",
            step.selected,
            head.join(", ")
        ));
        for (token, score) in &step.scores {
            if !score.is_masked() {
                text.push_str(&format!("  {token:?}: {:.6}\n", score.value()));
            }
        }
    }
    let stop = trace
        .stop_reason
        .map(|r| format!("{r:?}"))
        .unwrap_or_else(|| "none".into());
    text.push_str(&format!(
        "answer: {:?} (stop: {stop})\n",
        trace.output.trim()
    ));
    write_out(stdout, &text)?;
    Ok(trace)
}

/// Checks every line and prints one diagnostic per problem. Returns whether
/// the file is fully valid.
pub fn cmd_validate(path: &Path, stdout: &mut dyn Write) -> Result<bool, CliError> {
    let validation = validate_file(path)?;
    let mut text = String::new();
    for issue in &validation.issues {
        match issue {
            DatasetError::NoRecords => text.push_str("no records\n"),
            other => text.push_str(&format!("{other}\n")),
        }
    }
    let valid = validation.is_valid();
    text.push_str(&format!(
        "{}: {} valid records, {} problem(s)\n",
        path.display(),
        validation.records.len(),
        validation.issues.len()
    ));
    write_out(stdout, &text)?;
    Ok(valid)
}

pub const FIXTURE_DATASET: &str = "synthetic.jsonl";
pub const FIXTURE_TABLE: &str = "synthetic_table.json";

/// Writes the synthetic dataset and its table backend into `dir`.
pub fn cmd_gen_fixture(
    dir: &Path,
    count: usize,
    top_n: usize,
    template: &PromptTemplate,
) -> Result<(PathBuf, PathBuf), CliError> {
    let fixture =
        synthetic_fixture(count, template, top_n).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Failed(format!("cannot create {}: {e}", dir.display())))?;
    let dataset = dir.join(FIXTURE_DATASET);
    let table = dir.join(FIXTURE_TABLE);
    for (path, body) in [
        (&dataset, fixture.to_jsonl()),
        (&table, fixture.table_json()),
    ] {
        std::fs::write(path, body)
            .map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok((dataset, table))
}
