use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffbridge::harness::{self, ExperimentConfig};
use diffbridge::Error;

/// Simulate diffusion bridges with residual and guided proposals.
#[derive(Parser, Debug)]
#[command(name = "diffbridge", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate paths under each listed proposal and write paths and weights.
    Simulate,
    /// Compare two or more proposals against the exact or rejection-sampled bridge.
    Compare,
    /// Render a figure (`ou` or `sine-well`) as SVG plus CSV data.
    Figure { name: String },
    /// Run an independence Metropolis-Hastings chain over bridges.
    Mh {
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
    },
    /// Dump the backward table of the guided auxiliary.
    Tables,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AuxArg {
    Simple51,
    Lna,
    Brownian,
    Custom,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PolicyArg {
    ConstantEnd,
    Interpolate,
}

#[derive(Args, Debug)]
struct Overrides {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in model: ou, sine, ou-sine, linear or brownian.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    h: Option<f64>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Proposal name; repeat or comma-separate for several.
    #[arg(long, global = true, value_delimiter = ',')]
    proposal: Vec<String>,
    #[arg(long, global = true, value_enum)]
    aux: Option<AuxArg>,
    #[arg(long, global = true, value_enum)]
    sigma_policy: Option<PolicyArg>,
    #[arg(long, global = true)]
    t0: Option<f64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` settings, as in the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self) -> diffbridge::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.model {
            c.set("model", m)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config { field: "set".into(), message: format!("expected KEY=VALUE, got '{kv}'") })?;
            c.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(h) = self.h {
            c.h = h;
        }
        if let Some(n) = self.paths {
            c.paths = n;
        }
        if !self.proposal.is_empty() {
            c.proposals = self.proposal.clone();
        }
        if let Some(a) = self.aux {
            c.set(
                "aux",
                match a {
                    AuxArg::Simple51 => "simple51",
                    AuxArg::Lna => "lna",
                    AuxArg::Brownian => "brownian",
                    AuxArg::Custom => "custom",
                },
            )?;
        }
        if let Some(p) = self.sigma_policy {
            c.set(
                "sigma_policy",
                match p {
                    PolicyArg::ConstantEnd => "constant-end",
                    PolicyArg::Interpolate => "interpolate",
                },
            )?;
        }
        if let Some(t0) = self.t0 {
            c.t0 = Some(t0);
        }
        if let Some(out) = &self.out {
            c.out = out.clone();
        }
        if let Some(t) = self.threads {
            c.threads = Some(t);
        }
        Ok(c)
    }
}

fn run(cli: &Cli) -> diffbridge::Result<()> {
    let config = cli.overrides.apply()?;
    config.validate()?;
    harness::with_threads(config.threads, || -> diffbridge::Result<()> {
        match &cli.command {
            Command::Simulate => {
                for r in harness::run_simulate(&config)? {
                    println!("{}: ESS {:.3} of {}; wrote {} and {}", r.proposal, r.ess, config.paths, r.paths_csv.display(), r.weights_csv.display());
                }
            }
            Command::Compare => {
                let r = harness::run_compare(&config)?;
                println!("reference: {}", r.reference.source);
                for (name, values) in &r.table.rows {
                    let cells: Vec<String> = r
                        .table
                        .columns
                        .iter()
                        .zip(values)
                        .filter_map(|(c, v)| v.map(|v| format!("{c}={v:.6}")))
                        .collect();
                    println!("{name}: {}", cells.join(" "));
                }
                println!("wrote {}", r.csv.display());
            }
            Command::Figure { name } => {
                let r = harness::run_figure(name, &config)?;
                println!("wrote {}", r.svg.display());
                for c in &r.csvs {
                    println!("wrote {}", c.display());
                }
            }
            Command::Mh { iterations } => {
                let r = harness::run_mh(&config, *iterations)?;
                println!(
                    "acceptance rate {:.4} ({} of {}); wrote {} and {}",
                    r.acceptance_rate,
                    r.accepted,
                    r.iterations,
                    r.trace_csv.display(),
                    r.paths_csv.display()
                );
            }
            Command::Tables => {
                let path = harness::run_tables(&config)?;
                println!("wrote {}", path.display());
            }
        }
        Ok(())
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
