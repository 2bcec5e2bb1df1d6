//! The `ced` command: experiment runs, single-record traces, dataset checks.
//!
//! Exit codes: 0 success, 1 invalid dataset or other failure, 2 config
//! error, 3 backend unreachable or unloadable, 4 dataset error.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use ced_core::{Method, Metric, PromptTemplate, SelectionStrategy};
use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_decode_one, cmd_gen_fixture, cmd_run, cmd_validate, RunReport};
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "ced",
    version,
    about = "Contrastive-example decoding experiments"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the method x shot-count grid over the test split.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Report JSON path; a text table is written next to it with a .txt extension.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Decode one test record and show prompts, per-step heads and scores.
    DecodeOne {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        id: String,
        #[arg(short, long, default_value_t = 0)]
        k: usize,
        #[arg(long, default_value = "ced")]
        method: Method,
        /// Print the trace as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Schema-check a JSONL dataset.
    Validate { dataset: PathBuf },
    /// Write the synthetic dataset and its table backend.
    GenFixture {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = ced_core::DEFAULT_TOP_N)]
        top_n: usize,
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Print the resolved config as TOML.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Flags mirroring [`RunConfig`]; each overrides the config file.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// table:PATH, bigram:PATH or remote:URL.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub strategy: Option<SelectionStrategy>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Stop sequence; repeatable. `\n` and `\t` escapes are understood.
    #[arg(long)]
    pub stop: Option<Vec<String>>,
    #[arg(long, allow_negative_numbers = true)]
    pub floor: Option<f64>,
    #[arg(long)]
    pub metric: Option<Metric>,
    /// TOML prompt template with header, example and query keys.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Worker threads (default: one per processor).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

impl ConfigArgs {
    /// Config file (or defaults) with every given flag applied on top.
    pub fn resolve(&self, verbosity: u8) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    c.$field = v.clone().into();
                })*
            };
        }
        take!(dataset, backend, template, jobs);
        take!(
            alpha,
            shots,
            methods,
            strategy,
            seed,
            top_n,
            max_new_tokens,
            floor,
            metric
        );
        take!(smoothing, top_k, timeout_secs, max_in_flight);
        if let Some(stop) = &self.stop {
            c.stop = stop.iter().map(|s| unescape(s)).collect();
        }
        c.verbosity = c.verbosity.max(verbosity);
        Ok(c)
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match dispatch(cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { config, out, json } => {
            let mut config = config.resolve(cli.verbose)?;
            if out.is_some() {
                config.out = out;
            }
            cmd_run(&config, json, stdout)?;
            Ok(0)
        }
        Command::DecodeOne {
            config,
            id,
            k,
            method,
            json,
        } => {
            let config = config.resolve(cli.verbose)?;
            cmd_decode_one(&config, &id, k, method, json, stdout)?;
            Ok(0)
        }
        Command::Validate { dataset } => {
            let valid = cmd_validate(&dataset, stdout)?;
            Ok(if valid { 0 } else { error::EXIT_FAILURE })
        }
        Command::GenFixture {
            out_dir,
            count,
            top_n,
            template,
        } => {
            let template = match template {
                Some(path) => {
                    PromptTemplate::load(path).map_err(|e| CliError::Config(e.to_string()))?
                }
                None => PromptTemplate::default(),
            };
            let (dataset, table) = cmd_gen_fixture(&out_dir, count, top_n, &template)?;
            let _ = writeln!(
                stdout,
                "wrote {} and {}",
                dataset.display(),
                table.display()
            );
            Ok(0)
        }
        Command::ShowConfig { config } => {
            let config = config.resolve(cli.verbose)?;
            let _ = write!(stdout, "{}", config.to_toml());
            Ok(0)
        }
    }
}
