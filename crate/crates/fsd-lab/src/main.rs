use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fsd_lab::config::{build_models, ExperimentConfig, ModelPair};
use fsd_lab::corpus::{load_corpus, Corpus, PromptRecord, Split};
use fsd_lab::sweep::{emit_reports, run_sweep};
use fsd_lab::tuning::{match_sd_threshold, select_candidate_length, tune_threshold_on_dev};
use fsd_lab::verify::{run_suite, write_outcome, Suite};
use fsd_lab::LabError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fsdlab", about = "Speculative-decoding experiment harness")]
struct Cli {
    /// Root seed for tuning and verification procedures.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for sweep rows (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the config's draft-to-target cost ratio.
    #[arg(long, global = true)]
    cost_ratio: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sweep and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the candidate length minimizing target calls per token on the
    /// train split.
    #[command(name = "tune-L")]
    TuneL {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dev-set-size error study for threshold tuning, plus the
    /// SD-acceptance-matched threshold.
    #[command(name = "tune-T")]
    TuneT {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        dev_sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Run an oracle verification suite, appending to verify.jsonl.
    Verify {
        #[arg(long)]
        suite: Suite,
        /// Directory receiving verify.jsonl.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Uniform-distribution logit server for protocol tests.
    ServeEcho {
        /// Listen on TCP instead of stdio; 0 picks a free port.
        #[arg(long)]
        tcp: Option<u16>,
        #[arg(long, default_value_t = 16)]
        vocab_size: usize,
    },
}

fn load(config_path: &Path, cost_ratio: Option<f64>) -> Result<(ExperimentConfig, ModelPair, Corpus), LabError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(r) = cost_ratio {
        cfg.cost_ratio = r;
    }
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let models = build_models(&cfg.models, base_dir)?;
    let corpus = match &cfg.corpus {
        Some(path) => {
            let corpus = load_corpus(&base_dir.join(path))?;
            corpus.check_vocab(models.vocab_size())?;
            corpus
        }
        None => default_corpus(models.vocab_size()),
    };
    Ok((cfg, models, corpus))
}

/// Stand-in prompts when the config names no corpus: eight single-token
/// test prompts cycling through the vocabulary.
fn default_corpus(vocab_size: usize) -> Corpus {
    Corpus {
        records: (0..8)
            .map(|i| PromptRecord {
                id: format!("default-{i}"),
                tokens: vec![(i % vocab_size) as u32],
                split: Split::Test,
            })
            .collect(),
    }
}

fn first_threshold_policy(cfg: &ExperimentConfig) -> Result<&fsd_lab::config::PolicyConfig, LabError> {
    cfg.sweep
        .policies
        .iter()
        .find(|p| p.kind.uses_threshold())
        .ok_or_else(|| LabError::Config("no fsd/rfsd policy in config".into()))
}

fn run(cli: Cli) -> Result<ExitCode, LabError> {
    match cli.command {
        Command::Run { config, out } => {
            let (cfg, models, corpus) = load(&config, cli.cost_ratio)?;
            let prompts: Vec<&PromptRecord> = corpus.records.iter().collect();
            let result = run_sweep(&cfg, &models, &prompts);
            emit_reports(&result, &out)?;
            for e in &result.errors {
                eprintln!("row error: {e}");
            }
            println!(
                "{} rows, {} errors -> {}",
                result.rows.len(),
                result.errors.len(),
                out.display()
            );
            Ok(if result.errors.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::TuneL { config } => {
            let (cfg, models, corpus) = load(&config, cli.cost_ratio)?;
            let dev = corpus.split(Split::Train);
            let policy_cfg = &cfg.sweep.policies[0];
            let threshold = if policy_cfg.kind.uses_threshold() {
                cfg.sweep.t_grid[0]
            } else {
                0.0
            };
            let policy = policy_cfg.instantiate(threshold);
            let (l, table) = select_candidate_length(&cfg, &models, &dev, &policy, cli.seed)?;
            println!(
                "{}",
                json!({
                    "policy": policy_cfg.kind.name(),
                    "selected_candidate_length": l,
                    "grid": table,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TuneT {
            config,
            dev_sizes,
            trials,
        } => {
            let (cfg, models, corpus) = load(&config, cli.cost_ratio)?;
            let train = corpus.split(Split::Train);
            let test = corpus.split(Split::Test);
            let policy = first_threshold_policy(&cfg)?;
            let matched = match_sd_threshold(
                &cfg,
                &models,
                &train,
                policy,
                cfg.drafting.candidate_length,
                cli.seed,
            )?;
            let rows = tune_threshold_on_dev(
                &cfg, &models, &train, &test, policy, &dev_sizes, trials, cli.seed,
            )?;
            println!(
                "{}",
                json!({
                    "policy": policy.kind.name(),
                    "sd_matched": matched,
                    "dev_error_table": rows,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite, out } => {
            std::fs::create_dir_all(&out)?;
            let outcome = run_suite(suite, cli.seed)?;
            write_outcome(&out.join("verify.jsonl"), &outcome)?;
            println!(
                "{}: {}/{} {}",
                outcome.suite.name(),
                outcome.passed,
                outcome.total,
                if outcome.pass { "pass" } else { "FAIL" }
            );
            Ok(if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::ServeEcho { tcp, vocab_size } => {
            match tcp {
                Some(port) => fsd_lab::echo::serve_tcp(port, vocab_size)?,
                None => fsd_lab::echo::serve_stdio(vocab_size)?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .expect("rayon pool configured once");
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
