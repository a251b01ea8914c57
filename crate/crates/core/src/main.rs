use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ibrolab::harness::{compare, gradcheck_suite, train, ExperimentConfig, HarnessError, OracleEnvFile, OraclePolicy};
use ibrolab::model::load_checkpoint;
use ibrolab::rlcore::RegularizerKind;
use ibrolab::rollout::{eval_avg_at_k, SamplingConfig};
use ibrolab::tasks::{read_dataset, VocabMap, Verifier};

#[derive(Parser)]
#[command(name = "ibrolab", version, about = "Desk-scale RLVR laboratory")]
struct Cli {
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config.
    Train {
        config: PathBuf,
        /// Run directory; defaults to runs/<config stem>_seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// avg@k of a checkpoint on a dataset file.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.7)]
        top_p: f64,
        #[arg(long, default_value_t = 8)]
        max_new_tokens: usize,
    },
    /// Exact information-theoretic report for a checkpoint or a random policy.
    Oracle {
        /// A checkpoint path, or `random`.
        policy: String,
        env_config: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
    },
    /// Finite-difference check of every op and of the training loss.
    Gradcheck,
    /// Train each regularizer mode and tabulate the results.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "none,naive,ib")]
        modes: Vec<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let mut c = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Train { config, out } => {
            let c = load_config(&config, cli.seed)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_seed{}", stem(&config), c.seed)));
            let s = train(&c, Some(&dir))?;
            println!(
                "steps {} initial avg@{k} {:.4} final avg@{k} {:.4} best {:.4}",
                s.steps,
                s.initial_avg_at_k,
                s.final_avg_at_k,
                s.best_avg_at_k,
                k = c.eval.k
            );
            println!("run directory {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            k,
            temperature,
            top_p,
            max_new_tokens,
        } => {
            let params = load_checkpoint(&checkpoint, None)?;
            let data = read_dataset(std::io::BufReader::new(std::fs::File::open(&dataset)?))?;
            let sampling = SamplingConfig {
                temperature,
                top_p,
                max_new_tokens,
            };
            let v = eval_avg_at_k(&params, &data, k, &sampling, &Verifier::exact(VocabMap::standard()), cli.seed.unwrap_or(0))?;
            println!("avg@{k} {v:.6}");
        }
        Command::Oracle { policy, env_config, beta } => {
            let mut env = OracleEnvFile::load(&env_config)?;
            if let Some(s) = cli.seed {
                env.model.seed = s;
            }
            let report = OraclePolicy::parse(&policy).report(&env, beta)?;
            report.write_text(std::io::stdout().lock())?;
            if report.bound_residual < -1e-9 {
                eprintln!("bound residual is negative: {}", report.bound_residual);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Gradcheck => {
            let entries = gradcheck_suite(cli.seed.unwrap_or(0))?;
            let mut worst = 0.0f64;
            for e in &entries {
                println!("{:<28} {:.3e}", e.name, e.report.max_relative_error);
                worst = worst.max(e.report.max_relative_error);
            }
            println!("max relative error {worst:.3e}");
            if worst >= 1e-4 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Compare { config, modes, seeds, out } => {
            let c = load_config(&config, cli.seed)?;
            let modes = modes
                .iter()
                .map(|m| m.parse::<RegularizerKind>())
                .collect::<Result<Vec<_>, _>>()?;
            let seeds = if seeds.is_empty() { vec![c.seed] } else { seeds };
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_compare", stem(&config))));
            for r in compare(&c, &modes, &seeds, &dir)? {
                println!(
                    "{:<15} final {:.4} best {:.4} entropy {:.4} resp_len {:.3}",
                    r.mode.to_string(),
                    r.final_avg_at_k,
                    r.best_avg_at_k,
                    r.final_entropy,
                    r.final_response_length
                );
            }
            println!("wrote {}", dir.join("comparison.csv").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
