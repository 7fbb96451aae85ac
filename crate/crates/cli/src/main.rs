use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use difftok::config::ExperimentConfig;
use difftok::experiment::{self, files, GradcheckConfig};
use difftok::io;
use difftok::trainer::{self, Regime};
use difftok::Error;

#[derive(Parser, Debug)]
#[command(name = "difftok", version, about = "Differentiable k-means tokenization experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or reuse) the train and eval splits for a config.
    GenerateData(RunArgs),
    /// Train one regime and write every artifact to the run directory.
    Train(RunArgs),
    /// Re-score a finished run directory on its held-out split.
    Evaluate {
        /// Run directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Finite-difference check of the joint loss gradient.
    Gradcheck {
        /// JSON file with instance size overrides.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train several regimes on the same data and tabulate the results.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated regimes, e.g. baseline,freeze_ssl,full_finetune.
        #[arg(long, value_delimiter = ',', default_value = "baseline,freeze_ssl,full_finetune")]
        regimes: Vec<String>,
        /// Maximum number of concurrent runs.
        #[arg(long, env = "DIFFTOK_THREADS")]
        threads: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides both the training seed and the data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<config hash prefix>.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    regime: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> difftok::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        if let Some(regime) = &self.regime {
            config.regime = regime.parse()?;
        }
        config.validate()?;
        config.out_dir = Some(match &self.out {
            Some(dir) => dir.clone(),
            None => PathBuf::from("runs").join(&config.hash()[..12]),
        });
        Ok(config)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> difftok::Result<()> {
    println!("{}", io::to_json_pretty(value)?);
    Ok(())
}

fn out_dir(config: &ExperimentConfig) -> &Path {
    config.out_dir.as_deref().expect("resolve() always sets out_dir")
}

fn generate_data(args: &RunArgs) -> difftok::Result<ExitCode> {
    let config = args.resolve()?;
    let dir = out_dir(&config);
    std::fs::create_dir_all(dir).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
    let (train, eval) = experiment::generate_data(&config, dir)?;
    println!(
        "{}: {} train / {} eval utterances (data {})",
        dir.display(),
        train.utterances.len(),
        eval.utterances.len(),
        &io::data_hash(&config.synth)[..12]
    );
    Ok(ExitCode::SUCCESS)
}

fn train(args: &RunArgs) -> difftok::Result<ExitCode> {
    let config = args.resolve()?;
    log::info!("training {} into {}", config.regime, out_dir(&config).display());
    let (outcome, dir) = experiment::run_experiment(&config)?;
    print_json(&outcome.metrics_file())?;
    eprintln!("artifacts in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate(run: &Path) -> difftok::Result<ExitCode> {
    let config = ExperimentConfig::load(run.join(files::CONFIG))?;
    let (params, prov) = io::load_params(&run.join(files::PARAMS))?;
    if prov.config_hash != config.hash() {
        log::warn!("params.json was written by config {}, not {}", prov.config_hash, config.hash());
    }
    let (eval_set, data_hash) = io::load_dataset(&run.join(files::EVAL_DATA))?;
    if data_hash != io::data_hash(&config.synth) {
        return Err(Error::Format(format!("{} does not match the run's data config", files::EVAL_DATA)));
    }
    let state = trainer::restore(&config, params)?;
    let eval = trainer::evaluate(&state, &eval_set)?;
    let mut value = serde_json::json!({
        "regime": config.regime,
        "frame_accuracy": eval.frame_accuracy,
        "mean_asr_loss": eval.mean_asr_loss,
        "n_frames": eval.frames,
        "config_hash": config.hash(),
        "seed": config.seed,
    });
    if state.is_discrete() {
        let (report, _) = experiment::metric_report(&state, &eval_set, &config.hash())?;
        value["pnmi"] = report.pnmi.into();
        value["nqe"] = report.nqe.into();
        value["tsl"] = report.tsl.into();
        value["mter_pct"] = report.mter_pct.into();
        value["n_groups"] = report.n_groups.into();
    }
    print_json(&value)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> difftok::Result<ExitCode> {
    let mut cfg: GradcheckConfig = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
        None => GradcheckConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let outcome = experiment::cmd_gradcheck(&cfg)?;
    let report = outcome.to_json();
    if let Some(path) = out {
        io::save_json(path, &report)?;
    }
    print_json(&report)?;
    eprintln!(
        "gradcheck {}: max rel err {:.3e} (tolerance {:.0e}) in {:.2}s",
        if outcome.passed { "passed" } else { "FAILED" },
        outcome.max_rel_err,
        outcome.tolerance,
        outcome.elapsed_secs
    );
    Ok(if outcome.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn compare(args: &RunArgs, regimes: &[String], threads: Option<usize>) -> difftok::Result<ExitCode> {
    let config = args.resolve()?;
    let regimes = regimes.iter().map(|r| r.parse()).collect::<difftok::Result<Vec<Regime>>>()?;
    let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let dir = out_dir(&config).to_path_buf();
    let results = experiment::compare_regimes(&config, &regimes, threads)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
    experiment::generate_data(&config, &dir)?;
    for (i, (row, outcome)) in results.iter().enumerate() {
        let sub = dir.join(format!("{i}-{}", row.regime.as_str().to_ascii_lowercase()));
        std::fs::create_dir_all(&sub).map_err(|e| Error::Format(format!("{}: {e}", sub.display())))?;
        io::save_json(&sub.join(files::CONFIG), &outcome.state.config)?;
        experiment::write_outcome(outcome, &sub)?;
    }
    let rows: Vec<_> = results.into_iter().map(|(row, _)| row).collect();
    let csv = experiment::comparison_csv(&rows);
    io::save_text(&dir.join("comparison.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenerateData(args) => generate_data(args),
        Command::Train(args) => train(args),
        Command::Evaluate { run } => evaluate(run),
        Command::Gradcheck { config, seed, out } => gradcheck(config.as_deref(), *seed, out.as_deref()),
        Command::Compare { run, regimes, threads } => compare(run, regimes, *threads),
    };
    match result {
        Ok(code) => code,
        Err(e @ Error::NumericalAbort { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
