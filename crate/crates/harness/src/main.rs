use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use dnt_core::model::NormSetting;
use dnt_core::optim::OptimizerKind;
use dnt_harness::ablate::{run_grid, Grid};
use dnt_harness::checkpoint::Checkpoint;
use dnt_harness::config::RunConfig;
use dnt_harness::data::{MarkovSource, DEFAULT_CONCENTRATION};
use dnt_harness::report::write_run_dir;
use dnt_harness::verify::{self, Scope, VerifyOptions};
use dnt_harness::HarnessError;

/// Output directory override, applied after `--out`.
const OUT_DIR_ENV: &str = "DNT_OUT_DIR";

#[derive(Parser)]
#[command(name = "dnt", version, about = "Deeply normalized transformer lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the analytic-vs-numeric verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        scope: Scope,
        /// Corrupt the analytic side of the named check.
        #[arg(long, value_name = "CHECK")]
        inject_fault: Option<String>,
        /// Print one JSON object per check instead of a table.
        #[arg(long)]
        json: bool,
        /// List check names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Train one model and write its report and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a settings x optimizers grid and write comparison tables.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        settings: Vec<NormSetting>,
        #[arg(long, value_delimiter = ',', required = true)]
        optimizers: Vec<OptimizerKind>,
        #[arg(long)]
        config: PathBuf,
        /// Seeds per cell; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic Markov corpus, one token per line.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn cmd_verify(scope: Scope, inject_fault: Option<String>, json: bool, list: bool) -> anyhow::Result<bool> {
    let names = verify::check_names();
    if list {
        names.iter().for_each(|n| println!("{n}"));
        return Ok(true);
    }
    if let Some(f) = &inject_fault {
        if !names.contains(f) {
            bail!("unknown check `{f}`; see `dnt verify --list`");
        }
    }
    let checks = verify::run(scope, &VerifyOptions { inject_fault });
    for c in &checks {
        if json {
            println!("{}", serde_json::to_string(c)?);
        } else {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            println!(
                "{mark} {:<44} {:>11.3e} <= {:<8.1e} {:>7.2}s  {}",
                c.name, c.value, c.tolerance, c.seconds, c.detail
            );
            if !c.passed {
                println!("     identity: {}", c.formula);
            }
        }
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if !json {
        println!("{} checks, {failed} failed", checks.len());
    }
    Ok(failed == 0)
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out_dir(out, &cfg, "runs/train");
    match dnt_harness::train::train(&cfg) {
        Ok(run) => {
            write_run_dir(&dir, &run.report)?;
            Checkpoint::new(&cfg, &run.model, &run.state).save(&dir.join("checkpoint.bin"))?;
            let r = &run.report;
            println!(
                "{} steps: loss {:.4} -> {:.4} (floor {:.4}) in {:.1}s; wrote {}",
                r.losses.len(),
                r.initial_loss,
                r.final_loss,
                r.loss_floor,
                r.wall_clock_secs,
                dir.display()
            );
            Ok(true)
        }
        Err(HarnessError::Diverged { step, reason, report }) => {
            write_run_dir(&dir, &report)?;
            eprintln!("diverged at step {step}: {reason}; partial report in {}", dir.display());
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_ablate(
    settings: Vec<NormSetting>,
    optimizers: Vec<OptimizerKind>,
    config: &Path,
    seeds: Vec<u64>,
    jobs: usize,
    out: Option<PathBuf>,
) -> anyhow::Result<bool> {
    let cfg = RunConfig::load(config)?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
    let grid = Grid {
        settings,
        optimizers,
        seeds,
        jobs,
    };
    let dir = out_dir(out, &cfg, "runs/ablate");
    let report = run_grid(&cfg, &grid)?;
    report.write(&dir)?;
    for s in report.summaries() {
        let loss = s.final_loss.map_or("-".into(), |v| format!("{v:.4}"));
        let ratio = s.median_tail_ratio.map_or("-".into(), |v| format!("{v:.3}"));
        println!(
            "{:<3} {:<6} seed {:<3} final {loss:<8} q99/q50 {ratio:<7} {}",
            s.setting, s.optimizer, s.seed, s.status
        );
    }
    println!("wrote {}", dir.display());
    let failed = report.failed();
    if failed > 0 {
        eprintln!(
            "{}",
            HarnessError::PartialGrid {
                failed,
                total: grid.cells()
            }
        );
    }
    Ok(failed == 0)
}

fn cmd_gen_data(seed: u64, vocab: usize, length: usize, order: usize, out: &Path) -> anyhow::Result<bool> {
    let source = MarkovSource::random(seed, vocab, order, DEFAULT_CONCENTRATION)?;
    let tokens = source.generate(seed, length);
    let mut text = String::with_capacity(tokens.len() * 3);
    for t in &tokens {
        text.push_str(&t.to_string());
        text.push('\n');
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{length} tokens, entropy rate {:.4} nats, empirical floor {:.4}",
        source.entropy_rate(),
        source.corpus_cross_entropy(&tokens)
    );
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify {
            scope,
            inject_fault,
            json,
            list,
        } => cmd_verify(scope, inject_fault, json, list),
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Ablate {
            settings,
            optimizers,
            config,
            seeds,
            jobs,
            out,
        } => cmd_ablate(settings, optimizers, &config, seeds, jobs, out),
        Command::GenData {
            seed,
            vocab,
            length,
            order,
            out,
        } => cmd_gen_data(seed, vocab, length, order, &out),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
