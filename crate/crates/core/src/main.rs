use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedadc::data::partition;
use fedadc::engine::config::parse_pairs;
use fedadc::engine::run::load_datasets;
use fedadc::engine::{emit, fmt_g6, run_experiment, run_sweep, ExperimentConfig};
use fedadc::{Error, Result};

#[derive(Parser)]
#[command(name = "fedadc", version, about = "Federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Run the learning-rate x momentum grid.
        #[arg(long)]
        sweep: bool,
    },
    /// Print per-client class proportions and confidence vectors.
    PartitionStats {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the configured dataset as train.fadc / test.fadc.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    load_config_with(path, &[])
}

/// Reads the config file with some keys replaced by command-line values, so
/// that defaults derived from them (such as `data_seed`) follow the override.
fn load_config_with(
    path: &PathBuf,
    overrides: &[(&str, Option<String>)],
) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut pairs = parse_pairs(&text)?;
    for (key, value) in overrides {
        if let Some(value) = value {
            pairs.retain(|(k, _)| k != key);
            pairs.push((key.to_string(), value.clone()));
        }
    }
    ExperimentConfig::from_pairs(pairs)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            threads,
            sweep,
        } => {
            let cfg = load_config_with(
                &config,
                &[
                    ("seed", seed.map(|s| s.to_string())),
                    ("out", out.map(|o| o.display().to_string())),
                    ("threads", threads.map(|t| t.to_string())),
                ],
            )?;
            if sweep {
                let mut table = String::from("lr,beta,final_acc\n");
                for point in run_sweep(&cfg)? {
                    emit(&point.record, &point.record.config.out_dir)?;
                    println!(
                        "lr={} beta={} final_acc={}",
                        point.lr,
                        point.beta,
                        fmt_g6(point.record.final_acc)
                    );
                    table.push_str(&format!(
                        "{},{},{}\n",
                        point.lr,
                        point.beta,
                        fmt_g6(point.record.final_acc)
                    ));
                }
                fs::create_dir_all(&cfg.out_dir)?;
                fs::write(cfg.out_dir.join("sweep.csv"), table)?;
            } else {
                let record = run_experiment(&cfg)?;
                emit(&record, &cfg.out_dir)?;
                println!("final_acc={}", fmt_g6(record.final_acc));
                if let Some(p) = &record.personalization {
                    println!(
                        "personalized_mean_acc={} global_mean_local_acc={}",
                        fmt_g6(p.mean_acc),
                        fmt_g6(p.global_mean_local_acc)
                    );
                }
            }
            Ok(())
        }
        Command::PartitionStats { config } => {
            let cfg = load_config(&config)?;
            let (train, _) = load_datasets(&cfg.dataset)?;
            let part = partition(&train, &cfg.partition)?;
            if part.dropped > 0 {
                println!("# dropped {} samples", part.dropped);
            }
            let k = train.num_classes();
            let cols: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
            println!("client,stat,size,{}", cols.join(","));
            for s in &part.shards {
                for (name, v) in [("gamma", &s.gamma), ("rho", &s.rho)] {
                    let vals: Vec<String> = v.iter().map(|x| fmt_g6(*x)).collect();
                    println!("{},{name},{},{}", s.client_id, s.len(), vals.join(","));
                }
            }
            Ok(())
        }
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let (train, test) = load_datasets(&cfg.dataset)?;
            fs::create_dir_all(&out)?;
            train.write_to(fs::File::create(out.join("train.fadc"))?)?;
            test.write_to(fs::File::create(out.join("test.fadc"))?)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
