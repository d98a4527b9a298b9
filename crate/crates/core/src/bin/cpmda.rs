//! `cpmda synth-gen | run | report`
//!
//! Exit status is 0 on success, 1 for invalid input or configuration and 2
//! for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cpmda::cli_io::{
    config_to_string, emit_results, load_config, load_csv_dataset, read_results, results_rows,
    write_csv_dataset,
};
use cpmda::evaluation::{
    aggregate, pool_seed, run_experiment_with_data, DataConfig, ExperimentConfig, GroupRecord,
    Method,
};
use cpmda::gaussian_oracle::generate_glm_dataset;
use cpmda::Error;

#[derive(Parser)]
#[command(
    name = "cpmda",
    version,
    about = "Conformal prediction with missing covariates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[experiment] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if needed).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the training pool of repetition 0 as `data.csv` (target `y`).
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Runs the experiment and writes `results.csv` and the resolved `config.toml`.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method names, overriding `[methods] list`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Overrides `[methods] alpha`.
        #[arg(long)]
        alpha: Option<f64>,
        /// CSV dataset, overriding `[data] path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Target column for `--data` when the config has no `[data]` table.
        #[arg(long, default_value = "y")]
        target: String,
    },
    /// Aggregates a results CSV across repetitions.
    Report {
        /// Results CSV written by `run`.
        #[arg(long)]
        input: PathBuf,
        /// Summary CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::SynthGen { common } => {
            let cfg = load(&common)?;
            let g = cfg
                .generator
                .as_ref()
                .ok_or_else(|| Error::Config("synth-gen needs a [generator] table".into()))?;
            let params = g.params()?;
            let n = cfg.sizes.train + cfg.sizes.cal;
            let ds = generate_glm_dataset(
                &params,
                n,
                &cfg.missingness.spec(),
                pool_seed(cfg.experiment.seed, 0),
            )?;
            std::fs::create_dir_all(&common.out)?;
            write_csv_dataset(
                std::fs::File::create(common.out.join("data.csv"))?,
                &ds,
                None,
                "y",
            )?;
            Ok(())
        }
        Command::Run {
            common,
            methods,
            alpha,
            data,
            target,
        } => {
            let mut cfg = load(&common)?;
            if let Some(list) = methods {
                cfg.methods.list = list
                    .iter()
                    .map(|s| s.parse::<Method>())
                    .collect::<Result<_, _>>()?;
            }
            if let Some(a) = alpha {
                cfg.methods.alpha = a;
            }
            if let Some(path) = data {
                match cfg.data.as_mut() {
                    Some(d) => d.path = path,
                    None => {
                        cfg.data = Some(DataConfig {
                            path,
                            target,
                            na_tokens: cpmda::evaluation::default_na_tokens(),
                        })
                    }
                }
            }
            cfg.validate()?;
            let dataset = match &cfg.data {
                Some(d) => Some(load_csv_dataset(&d.path, &d.target, &d.na_tokens)?),
                None => None,
            };
            let reports = run_experiment_with_data(&cfg, dataset.as_ref())?;
            std::fs::create_dir_all(&common.out)?;
            emit_results(&results_rows(&reports), &common.out.join("results.csv"))?;
            std::fs::write(common.out.join("config.toml"), config_to_string(&cfg)?)?;
            Ok(())
        }
        Command::Report { input, out } => {
            let rows = read_results(std::fs::File::open(&input)?)?;
            let agg = aggregate(rows.iter().map(|r| GroupRecord {
                method: &r.method,
                group: &r.group,
                coverage: r.coverage,
                mean_length: r.mean_length,
                infinite_fraction: r.infinite_fraction,
            }));
            let mut text = String::from(
                "method,group,repetitions,coverage,coverage_mcse,mean_length,infinite_fraction\n",
            );
            for a in agg {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    a.method,
                    a.group,
                    a.repetitions,
                    cpmda::cli_io::format_g(a.coverage),
                    cpmda::cli_io::format_g(a.coverage_mcse),
                    cpmda::cli_io::format_g(a.mean_length),
                    cpmda::cli_io::format_g(a.infinite_fraction),
                ));
            }
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = load_config(Path::new(&common.config))?;
    if let Some(s) = common.seed {
        cfg.experiment.seed = s;
    }
    Ok(cfg)
}
