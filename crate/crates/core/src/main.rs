use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use fedgradnorm::harness::{compare_strategies, run_experiment, write_metrics, ExperimentConfig};
use fedgradnorm::server::WeightingStrategy;
use fedgradnorm::Error;

/// Simulate federated multi-task training with balanced loss weights.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fedgradnorm or equal; overrides the config file.
    #[arg(long)]
    strategy: Option<WeightingStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Metrics CSV path. With --compare, `-fedgradnorm` and `-equal` are
    /// inserted before the extension.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run both strategies from the same initialization and print a summary.
    #[arg(long)]
    compare: bool,
}

fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{tag}"),
    };
    path.with_file_name(name)
}

fn fmt_round(r: Option<usize>) -> String {
    r.map_or_else(|| "-".into(), |r| r.to_string())
}

fn run(cli: Cli) -> fedgradnorm::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.strategy {
        cfg.strategy = s;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(k) = cli.rounds {
        cfg.rounds = k;
    }
    if let Some(out) = cli.out {
        cfg.output = Some(out);
    }
    cfg.validate()?;

    if !cli.compare {
        let outcome = run_experiment(&cfg)?;
        if let Some(last) = outcome.metrics.last() {
            println!("round {}: objective {:.6e}", last.round, last.objective);
            for (i, t) in last.tasks.iter().enumerate() {
                println!(
                    "task {i}: loss {:.6e} (F0 {:.6e}), weight {:.6}",
                    t.raw_loss, outcome.initial_losses[i], t.weight
                );
            }
        }
        return Ok(());
    }

    let cmp = compare_strategies(&cfg)?;
    if let Some(out) = &cfg.output {
        let n = cfg.num_tasks();
        write_metrics(&cmp.fedgradnorm.metrics, n, &suffixed(out, "fedgradnorm"))?;
        write_metrics(&cmp.equal.metrics, n, &suffixed(out, "equal"))?;
    }
    println!(
        "task,initial_loss,fedgradnorm_final,equal_final,fedgradnorm_half_round,equal_half_round"
    );
    for t in &cmp.tasks {
        println!(
            "{},{:.6e},{:.6e},{:.6e},{},{}",
            t.task_id,
            t.initial_loss,
            t.fedgradnorm_final,
            t.equal_final,
            fmt_round(t.fedgradnorm_half_round),
            fmt_round(t.equal_half_round)
        );
    }
    let (fgn, eq) = cmp.worst_normalized();
    println!("worst normalized final loss: fedgradnorm {fgn:.6e}, equal {eq:.6e}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
