use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use fedhpro::data::write_csv;
use fedhpro::experiment::{collect_run_dirs, compare_runs, write_cell, Overrides, Preset};
use fedhpro::gradcheck::{run_suite, GradcheckConfig, Suite};

#[derive(Parser)]
#[command(name = "fedhpro", version, about = "Federated hyper-prototype learning simulator")]
struct Cli {
    /// Log progress (repeat for more detail); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, seed) cell of a scenario.
    Run(RunArgs),
    /// Summarize completed runs: mean ± std of final accuracy per strategy.
    Compare(CompareArgs),
    /// Dataset utilities.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write the client shards and test set of one scenario draw as CSV.
    Export(ExportArgs),
}

#[derive(Args, Clone, Default)]
struct ScenarioArgs {
    /// Scenario preset: nid1, nid2, longtail, domain2, domain4.
    #[arg(long)]
    preset: Option<String>,
    /// Dirichlet concentration for label skew.
    #[arg(long)]
    alpha: Option<f64>,
    /// Long-tail imbalance ratio.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    /// Local epochs per round.
    #[arg(long)]
    epochs: Option<usize>,
    /// TOML file with the same keys as the flags plus [data] and [federation] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Replace existing output directories.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, conflicts_with = "strategies")]
    strategy: Option<String>,
    /// Comma-separated strategy list.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Client-pool threads inside each run.
    #[arg(long)]
    workers: Option<usize>,
    /// Runs executed concurrently (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories, or parents containing them.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Also write the comparison as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only run one suite: ce-backward, hpcl-dz, hpal-dz, gm-ds.
    #[arg(long)]
    suite: Option<String>,
}

/// Exit status for bad invocations, matching clap's usage errors.
const USAGE_ERROR: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::Dataset(DatasetCommand::Export(args)) => export(args),
        Command::Gradcheck(args) => gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn layered(scenario: &ScenarioArgs, cli: Overrides) -> anyhow::Result<Result<Overrides, ExitCode>> {
    let file = match &scenario.config {
        Some(p) => Overrides::from_toml_file(p)?,
        None => Overrides::default(),
    };
    let cli = Overrides {
        preset: scenario.preset.clone(),
        alpha: scenario.alpha,
        rho: scenario.rho,
        rounds: scenario.rounds,
        clients: scenario.clients,
        epochs: scenario.epochs,
        out_dir: scenario.out_dir.clone(),
        force: scenario.force.then_some(true),
        ..cli
    };
    let merged = cli.over(file);
    if let Some(name) = &merged.preset {
        if name.parse::<Preset>().is_err() {
            eprintln!(
                "error: unknown preset '{name}'; valid presets: {}",
                Preset::valid_names()
            );
            return Ok(Err(ExitCode::from(USAGE_ERROR)));
        }
    }
    Ok(Ok(merged))
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let cli = Overrides {
        strategy: args.strategy,
        strategies: args.strategies,
        seed: args.seed,
        seeds: args.seeds,
        workers: args.workers,
        ..Overrides::default()
    };
    let ov = match layered(&args.scenario, cli)? {
        Ok(ov) => ov,
        Err(code) => return Ok(code),
    };
    let exp = ov.resolve()?;
    let out_root = ov.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let force = ov.force.unwrap_or(false);
    let workers = ov.workers.unwrap_or(1);

    let cells = exp.cells();
    let dirs: Vec<PathBuf> = cells
        .iter()
        .map(|&(s, seed)| out_root.join(exp.cell_name(s, seed)))
        .collect();
    if !force {
        let existing: Vec<String> = dirs
            .iter()
            .filter(|d| d.exists())
            .map(|d| d.display().to_string())
            .collect();
        if !existing.is_empty() {
            bail!(
                "output already exists (use --force to overwrite): {}",
                existing.join(", ")
            );
        }
    }

    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<anyhow::Result<f64>> = pool.install(|| {
        cells
            .par_iter()
            .zip(&dirs)
            .map(|(&(strategy, seed), dir)| {
                let outcome = exp
                    .run_cell(strategy, seed, workers, |_| {})
                    .with_context(|| format!("{strategy} seed {seed}"))?;
                let summary = exp.summary(strategy, seed, &outcome);
                write_cell(dir, &outcome.records, &summary, &outcome, force)?;
                Ok(summary.final_metrics.test_accuracy)
            })
            .collect()
    });

    let mut failed = 0;
    for (((strategy, seed), dir), res) in cells.iter().zip(&dirs).zip(results) {
        match res {
            Ok(acc) => println!(
                "{:<16} seed {:<4} acc {:>6.2}%  {}",
                strategy,
                seed,
                100.0 * acc,
                dir.display()
            ),
            Err(e) => {
                failed += 1;
                eprintln!("error: {e:#}");
            }
        }
    }
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn compare(args: CompareArgs) -> anyhow::Result<ExitCode> {
    let dirs = collect_run_dirs(&args.dirs)?;
    if dirs.len() < 2 {
        bail!("compare needs at least two completed runs, found {}", dirs.len());
    }
    let cmp = compare_runs(&dirs)?;
    print!("{cmp}");
    if let Some(path) = args.json {
        let text = serde_json::to_string_pretty(&cmp)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn export(args: ExportArgs) -> anyhow::Result<ExitCode> {
    let cli = Overrides {
        seed: args.seed,
        ..Overrides::default()
    };
    let ov = match layered(&args.scenario, cli)? {
        Ok(ov) => ov,
        Err(code) => return Ok(code),
    };
    let exp = ov.resolve()?;
    let seed = exp.seeds[0];
    let dir = ov
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}_data_s{seed}", exp.tag())));
    if dir.exists() && !ov.force.unwrap_or(false) {
        bail!("{} already exists (use --force to overwrite)", dir.display());
    }
    let data = exp.build_data(seed)?;
    write_dataset_dir(&dir, &data.clients, &data.test)?;
    println!(
        "wrote {} client files and test.csv to {}",
        data.clients.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_dataset_dir(
    dir: &Path,
    clients: &[fedhpro::data::LabeledDataset],
    test: &fedhpro::data::LabeledDataset,
) -> anyhow::Result<()> {
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".export.partial-{}", std::process::id()));
    let result = (|| -> anyhow::Result<()> {
        fs::create_dir_all(&staging)?;
        for (k, c) in clients.iter().enumerate() {
            write_csv(c, &staging.join(format!("client_{k}.csv")))?;
        }
        write_csv(test, &staging.join("test.csv"))?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&staging, dir)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let cfg = GradcheckConfig {
        instances: args.instances,
        seed: args.seed,
        ..GradcheckConfig::default()
    };
    let suites: Vec<Suite> = match &args.suite {
        Some(name) => match Suite::ALL.iter().find(|s| s.name() == name) {
            Some(&s) => vec![s],
            None => {
                let valid: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
                eprintln!("error: unknown suite '{name}'; valid suites: {}", valid.join(", "));
                return Ok(ExitCode::from(USAGE_ERROR));
            }
        },
        None => Suite::ALL.to_vec(),
    };
    let mut ok = true;
    for s in suites {
        let report = run_suite(s, &cfg)?;
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {report}");
        if !report.passed() {
            ok = false;
            if let Some(w) = report.worst {
                println!(
                    "     worst: instance {} coord {} analytic {:.6e} numeric {:.6e}",
                    w.instance, w.coordinate, w.analytic, w.numeric
                );
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
