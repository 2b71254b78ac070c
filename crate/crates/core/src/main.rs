use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use feddec::error::{Error, Result};
use feddec::harness::{
    cmd_convergence, cmd_spectra, cmd_table1, cmd_verify, with_workers, ExperimentSpec, GraphSpec, LemmaSetup,
    OutputDir, SpectraParams, Table1Grid, VerifyOptions, OUTPUT_DIR_ENV,
};
use feddec::{Graph, WeightRule};

#[derive(Parser)]
#[command(name = "feddec", version, about = "Semi-decentralized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long, env = OUTPUT_DIR_ENV, default_value = "feddec-out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed; repeat to give several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// File of seeds separated by whitespace or commas; `#` starts a comment.
    #[arg(long)]
    seeds_file: Option<PathBuf>,
}

impl Common {
    fn seeds(&self) -> Result<Vec<u64>> {
        let mut seeds = self.seeds.clone();
        if let Some(path) = &self.seeds_file {
            seeds.extend(read_seeds(path)?);
        }
        Ok(seeds)
    }

    fn single_seed(&self) -> Result<u64> {
        match self.seeds()?.as_slice() {
            [] => Ok(0),
            [s] => Ok(*s),
            _ => Err(Error::Config("this command takes a single seed".into())),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Geographic,
    Random,
    Complete,
    Path,
}

#[derive(Subcommand)]
enum Cmd {
    /// Mean |λ₂(W)|² over connected geographic and Erdős–Rényi draws.
    Table1 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        realizations: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 40])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.35, 0.5, 0.65])]
        radii: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
        probs: Vec<f64>,
        #[arg(long, default_value_t = WeightRule::default())]
        weight_rule: WeightRule,
    },
    /// FedDec and FedAvg runs over every graph, run config and seed.
    Converge {
        #[command(flatten)]
        common: Common,
        /// TOML experiment file; missing fields take the reference defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        instance_seed: Option<u64>,
        #[arg(long)]
        weight_rule: Option<WeightRule>,
        #[arg(long)]
        activation_prob: Option<f64>,
        /// Overrides T in every run.
        #[arg(long)]
        iterations: Option<usize>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// λ̂₂ and α for one graph model, plus the α curve.
    Spectra {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "geographic")]
        graph: Family,
        #[arg(long, default_value_t = 0.35)]
        radius: f64,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long)]
        augment_path: bool,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        activation_prob: f64,
        #[arg(long, default_value_t = WeightRule::default())]
        weight_rule: WeightRule,
        #[arg(long, default_value_t = feddec::mixing::DEFAULT_MC_SAMPLES)]
        samples: usize,
    },
    /// Invariant suite; exits with status 1 if a hard check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Mixing matrix CSV to validate.
        #[arg(long)]
        mixing_fixture: Option<PathBuf>,
        /// Edge list the fixture is checked against (default: the verify graph).
        #[arg(long)]
        fixture_graph: Option<PathBuf>,
    },
}

fn read_seeds(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|e| Error::Parse(format!("seed {s:?}: {e}"))))
        .collect()
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Table1 {
            common,
            realizations,
            sizes,
            radii,
            probs,
            weight_rule,
        } => {
            let grid = Table1Grid {
                sizes,
                radii,
                probs,
                weight_rule,
                realizations,
                seed: common.single_seed()?,
            };
            let table = with_workers(common.workers, || cmd_table1(&grid))??;
            let out = OutputDir::new(&common.out)?;
            table.write(&out)?;
            print!("{}", table.to_long_csv());
            Ok(true)
        }
        Cmd::Converge {
            common,
            config,
            instance_seed,
            weight_rule,
            activation_prob,
            iterations,
            print_config,
        } => {
            let mut spec = match &config {
                Some(p) => ExperimentSpec::from_toml(&fs::read_to_string(p)?)?,
                None => ExperimentSpec::default(),
            };
            let seeds = common.seeds()?;
            if !seeds.is_empty() {
                spec.seeds = seeds;
            }
            if let Some(s) = instance_seed {
                spec.instance_seed = s;
            }
            if let Some(r) = weight_rule {
                spec.mixing.weight_rule = r;
            }
            if let Some(a) = activation_prob {
                spec.mixing.activation_prob = a;
            }
            if let Some(t) = iterations {
                for r in &mut spec.runs {
                    r.iterations = t;
                }
            }
            spec.validate()?;
            if print_config {
                print!("{}", spec.to_toml()?);
                return Ok(true);
            }
            let out_dir = spec.output_dir.clone().unwrap_or(common.out.clone());
            let bundle = with_workers(common.workers, || cmd_convergence(&spec))??;
            bundle.write(&OutputDir::new(out_dir)?)?;
            print!("{}", bundle.summary_csv());
            Ok(true)
        }
        Cmd::Spectra {
            common,
            graph,
            radius,
            p,
            augment_path,
            n,
            activation_prob,
            weight_rule,
            samples,
        } => {
            let graph = match graph {
                Family::Geographic => GraphSpec::Geographic { radius, augment_path },
                Family::Random => GraphSpec::Random { p, augment_path },
                Family::Complete => GraphSpec::Complete,
                Family::Path => GraphSpec::Path,
            };
            let params = SpectraParams {
                graph,
                n,
                activation_prob,
                weight_rule,
                samples,
                seed: common.single_seed()?,
            };
            let res = with_workers(common.workers, || cmd_spectra(&params))??;
            res.write(&OutputDir::new(&common.out)?)?;
            print!("{}", res.to_kv());
            Ok(true)
        }
        Cmd::Verify {
            common,
            mixing_fixture,
            fixture_graph,
        } => {
            let mut setup = LemmaSetup::default();
            let seeds = common.seeds()?;
            if !seeds.is_empty() {
                setup.seeds = seeds;
            }
            let mut opts = VerifyOptions::new(setup);
            if let Some(p) = mixing_fixture {
                opts.mixing_fixture = Some(fs::read_to_string(p)?);
            }
            if let Some(p) = fixture_graph {
                opts.fixture_graph = Some(Graph::from_edge_list(&fs::read_to_string(p)?)?);
            }
            let report = with_workers(common.workers, || cmd_verify(&opts))??;
            let out = OutputDir::new(&common.out)?;
            out.write("verify.txt", &report.to_text())?;
            print!("{}", report.to_text());
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
