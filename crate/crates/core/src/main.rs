use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cfrl::blackbox::ClassifierKind;
use cfrl::data::synthetic::{gaussian_blobs, write_table};
use cfrl::metrics::validity;
use cfrl::pipeline::{self, GenerateOptions, Method, RunConfig};
use cfrl::Result;

#[derive(Parser)]
#[command(name = "cfrl", version, about = "Counterfactual explanations for tabular classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// DDPG training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Sparsity loss weight.
    #[arg(long)]
    lambda_s: Option<f64>,
    /// Consistency loss weight.
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Autoencoder latent dimension.
    #[arg(long)]
    latent_dim: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.ddpg.steps = n;
        }
        if let Some(v) = self.lambda_s {
            cfg.ddpg.lambda_s = v;
        }
        if let Some(v) = self.lambda_c {
            cfg.ddpg.lambda_c = v;
        }
        if let Some(d) = self.latent_dim {
            cfg.autoencoder.latent_dim = d;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ours,
    Mo,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Logistic,
    Tree,
}

#[derive(Subcommand)]
enum Command {
    /// Split the CSV and fit the schema statistics.
    Ingest {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides the config's CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Overrides the config's schema path.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Train the classifier to be explained.
    TrainBlackbox {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Train the autoencoder.
    TrainAe {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the counterfactual actor and critic.
    TrainCf {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write counterfactuals for the test split or an input CSV.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "ours")]
        method: MethodArg,
        /// Target class name for every instance; random other class if absent.
        #[arg(long)]
        target: Option<String>,
        /// Constraint file overriding the config's.
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// CSV of instances to explain.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Counterfactuals per instance under sampled conditions.
        #[arg(long)]
        diverse: Option<usize>,
    },
    /// Score the generated results.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Every stage for several consecutive seeds, with a mean±std table.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Write the synthetic two-cluster dataset.
    MakeBlobs {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        schema: PathBuf,
    },
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| cfrl::Error::io(p, e))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { run, csv, schema } => {
            let mut cfg = run.config()?;
            if let Some(p) = csv {
                cfg.data.csv = p;
            }
            if let Some(p) = schema {
                cfg.data.schema = p;
            }
            cfg.check_paths()?;
            let ds = pipeline::ingest(&cfg, &run.out)?;
            println!(
                "ingested {} rows ({} train, {} test), schema {}",
                ds.records.len(),
                ds.split.train.len(),
                ds.split.test.len(),
                ds.schema.fingerprint_hex()
            );
        }
        Command::TrainBlackbox { run, kind } => {
            let mut cfg = run.config()?;
            if let Some(k) = kind {
                cfg.blackbox.kind = match k {
                    KindArg::Logistic => ClassifierKind::Logistic,
                    KindArg::Tree => ClassifierKind::Tree,
                };
            }
            let s = pipeline::train_blackbox(&cfg, &run.out)?;
            println!(
                "{:?}: train accuracy {:.4}, test accuracy {:.4}",
                s.kind, s.train_accuracy, s.test_accuracy
            );
        }
        Command::TrainAe { run } => {
            let history = pipeline::train_autoencoder(&run.config()?, &run.out)?;
            if let Some(l) = history.last() {
                println!("autoencoder trained for {} steps, final loss {l:.5}", history.len());
            }
        }
        Command::TrainCf { run } => {
            let cfg = run.config()?;
            let agent = pipeline::train_cf(&cfg, &run.out)?;
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |r| format!("{r:.3}"));
            println!(
                "trained {} steps; reward rate {} during exploration, {} over the last 100 steps",
                agent.log.len(),
                fmt(agent.random_baseline(cfg.ddpg.exploration_steps)),
                fmt(agent.final_reward_rate(100))
            );
        }
        Command::Generate {
            run,
            method,
            target,
            constraints,
            input,
            diverse,
        } => {
            let method = match method {
                MethodArg::Ours => Method::Ours,
                MethodArg::Mo => Method::Mo,
            };
            let opts = GenerateOptions {
                input,
                target,
                constraints,
                diverse,
            };
            let results = pipeline::generate(&run.config()?, &run.out, method, &opts)?;
            println!(
                "{} counterfactuals, validity {:.4}, written to {}",
                results.len(),
                validity(&results)?,
                run.out.join(method.csv_file()).display()
            );
        }
        Command::Evaluate { run } => {
            pipeline::evaluate(&run.config()?, &run.out)?;
            let path = run.out.join(pipeline::REPORT_TEXT);
            print!("{}", std::fs::read_to_string(&path).map_err(|e| cfrl::Error::io(&path, e))?);
        }
        Command::Pipeline { run, seeds } => {
            let cfg = run.config()?;
            let list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            pipeline::run_seeds(&cfg, &run.out, &list)?;
            let path = run.out.join(pipeline::SUMMARY_TEXT);
            print!("{}", std::fs::read_to_string(&path).map_err(|e| cfrl::Error::io(&path, e))?);
        }
        Command::MakeBlobs { n, seed, csv, schema } => {
            for p in [&csv, &schema] {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    ensure_dir(parent)?;
                }
            }
            write_table(&gaussian_blobs(n, seed), &csv, &schema)?;
            println!("wrote {n} rows to {}", csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
