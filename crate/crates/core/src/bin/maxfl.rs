use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maxfl::config::{parse_config, parse_meanest_config, MeanEstConfig};
use maxfl::experiment::{run_experiment, run_meanest, with_threads};
use maxfl::models::{fd_check, Batch, ModelSpec, Targets};
use maxfl::rng::std_normal;
use maxfl::{Error, ModelParams, Purpose, Result, RngStream};
use rand::Rng;

#[derive(Parser)]
#[command(name = "maxfl", version, about = "Appeal-weighted federated learning simulator")]
struct Cli {
    /// Worker threads for client fan-out. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment; writes rounds.csv and summary.json.
    Fl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo appeal sweep for two-client mean estimation.
    Meanest {
        /// Defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every model family's gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse and validate a config, then print it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Treat the file as a mean-estimation sweep config.
        #[arg(long)]
        meanest: bool,
    },
}

fn random_draw(spec: &ModelSpec, rng: &mut impl Rng) -> Result<(ModelParams, Batch)> {
    let n = rng.random_range(1..=16);
    let params = ModelParams((0..spec.param_count()).map(|_| 0.5 * std_normal(rng)).collect());
    let batch = if matches!(spec, ModelSpec::ScalarQuadratic) {
        Batch::scalar((0..n).map(|_| 3.0 * std_normal(rng)).collect())
    } else {
        let dim = spec.input_dim();
        let inputs = (0..n * dim).map(|_| std_normal(rng)).collect();
        let targets = match spec.classes() {
            Some(c) => Targets::Labels((0..n).map(|_| rng.random_range(0..c)).collect()),
            None => Targets::Values((0..n).map(|_| std_normal(rng)).collect()),
        };
        Batch::new(inputs, dim, targets)?
    };
    Ok((params, batch))
}

/// Returns whether every family stayed within tolerance.
fn gradcheck(draws: usize, h: f64, seed: u64) -> Result<bool> {
    let specs = [
        (ModelSpec::ScalarQuadratic, 1e-9),
        (ModelSpec::LinearRegression { input_dim: 3 }, 1e-4),
        (ModelSpec::SoftmaxRegression { input_dim: 4, classes: 3 }, 1e-4),
        (
            ModelSpec::Mlp {
                layer_sizes: vec![4, 8, 3],
            },
            1e-4,
        ),
    ];
    let mut ok = true;
    for (i, (spec, tol)) in specs.iter().enumerate() {
        let mut rng = RngStream::new(seed, i as u64, 0, Purpose::Test).rng();
        let mut worst = 0.0f64;
        for _ in 0..draws {
            let (params, batch) = random_draw(spec, &mut rng)?;
            worst = worst.max(fd_check(spec, &params, &batch, h)?);
        }
        let pass = worst <= *tol;
        ok &= pass;
        println!(
            "{:<20} draws={draws} max_rel_err={worst:.3e} tol={tol:.0e} {}",
            kind_name(spec),
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn kind_name(spec: &ModelSpec) -> &'static str {
    match spec {
        ModelSpec::ScalarQuadratic => "scalar_quadratic",
        ModelSpec::LinearRegression { .. } => "linear_regression",
        ModelSpec::SoftmaxRegression { .. } => "softmax_regression",
        ModelSpec::Mlp { .. } => "mlp",
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if cli.threads == 0 {
        return Err(Error::config_key("threads", "must be at least 1"));
    }
    match cli.command {
        Command::Fl { config, out } => {
            let config = parse_config(&config)?;
            let summary = with_threads(cli.threads, || run_experiment(&config, out.as_deref()))??;
            let m = &summary.mean;
            let s = &summary.std;
            println!("rounds: {}", summary.rounds_csv.display());
            println!(
                "gm_appeal seen {:.4} ± {:.4}, unseen {:.4} ± {:.4}",
                m.gm_appeal_seen, s.gm_appeal_seen, m.gm_appeal_unseen, s.gm_appeal_unseen
            );
        }
        Command::Meanest { config, out } => {
            let config = match config {
                Some(path) => parse_meanest_config(path)?,
                None => MeanEstConfig::default(),
            };
            let (path, rows) = with_threads(cli.threads, || run_meanest(&config, out.as_deref()))??;
            println!("{} rows written to {}", rows.len(), path.display());
        }
        Command::Gradcheck { draws, h, seed } => {
            if draws == 0 {
                return Err(Error::config_key("draws", "must be at least 1"));
            }
            if !gradcheck(draws, h, seed)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Validate { config, meanest } => {
            if meanest {
                let c = parse_meanest_config(&config)?;
                print!("{}", toml::to_string(&c).expect("config serializes"));
            } else {
                print!("{}", parse_config(&config)?.to_toml_string());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
