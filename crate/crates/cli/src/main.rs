//! `polymer-lab`: batch driver for the polymer laboratory.
//!
//! Every subcommand writes a table (`<command>.csv` or `<command>.jsonl`) and
//! a `<command>_summary.json` into the output directory.
//!
//! Exit codes: 0 success, 1 invariant failure, 2 configuration error,
//! 3 sampler degeneracy.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polymer_core::config::{Overrides, SamplerKind, StudyConfig};
use polymer_core::dynamics::{write_trajectory_binary, write_trajectory_csv};
use polymer_core::experiments::{
    run_gibbs, run_ldp, run_scaling_study, run_tail_probes, run_validation_suite, spectra_table,
    ValidationOptions,
};
use polymer_core::increments::variance_scaling_scan;
use polymer_core::observables::{center_of_mass, radius_of_gyration};
use polymer_core::report::{emit_json, emit_report, Cell, Format, Table};
use polymer_core::rng::derive_seed;
use polymer_core::spectral::normalizing_constant_c0;
use polymer_core::{Convention, Error, PolymerModel};
use serde_json::json;

/// Radius used by commands that never count intersections when none is given.
const PLACEHOLDER_EPSILON: f64 = 0.5;

#[derive(Parser)]
#[command(name = "polymer-lab", version, about = "Moving-polymer simulation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML study configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `literal` or `paper`.
    #[arg(long, global = true)]
    convention: Option<Convention>,
    /// `importance`, `metropolis` or `auto`.
    #[arg(long, global = true)]
    sampler: Option<SamplerKind>,
    /// Chain lengths, comma separated.
    #[arg(long = "J", global = true, value_delimiter = ',')]
    chains: Option<Vec<usize>>,
    #[arg(long = "T", global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    drift: Option<f64>,
    /// Table format: `csv` or `jsonl`.
    #[arg(long, global = true, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalues and amplitudes of the Neumann averaging operator.
    Spectra,
    /// Free trajectories as CSV and binary dumps, one per chain length.
    Simulate,
    /// Closed-form stationary increment variances over all site pairs.
    VarianceScan,
    /// Partition function and polymer-measure expectations.
    Gibbs,
    /// Per-mode rate functions and Monte Carlo tail probes.
    Ldp,
    /// Radius of gyration against chain length.
    Scaling,
    /// Lower and upper tail probabilities of R across horizons.
    Tails {
        #[arg(long)]
        k1: Option<f64>,
        #[arg(long)]
        k2: Option<f64>,
    },
    /// Runs every invariant check.
    Validate,
}

enum Failure {
    Invariant(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invariant(_) => 1,
            Failure::Core(Error::Config(_) | Error::InvalidParameter(_) | Error::DimensionMismatch { .. }) => 2,
            Failure::Core(Error::Degenerate { .. } | Error::InsufficientRows { .. }) => 3,
            Failure::Core(_) => 1,
        }
    }
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        chains: c.chains.clone(),
        horizon: c.horizon,
        beta: c.beta,
        epsilon: c.epsilon,
        drift: c.drift,
        convention: c.convention,
        sampler: c.sampler,
        seed: c.seed,
        output_dir: c.out.clone(),
    }
}

fn extension(format: Format) -> &'static str {
    match format {
        Format::Csv => "csv",
        Format::Jsonl => "jsonl",
    }
}

struct Output<'a> {
    dir: &'a Path,
    format: Format,
}

impl Output<'_> {
    fn table(&self, name: &str, table: &Table) -> Result<(), Error> {
        emit_report(table, self.format, &self.dir.join(format!("{name}.{}", extension(self.format))))
    }

    fn summary(&self, name: &str, value: &serde_json::Value) -> Result<(), Error> {
        emit_json(value, &self.dir.join(format!("{name}_summary.json")))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let needs_epsilon = matches!(cli.command, Command::Gibbs | Command::Scaling | Command::Tails { .. });
    let fallback = (!needs_epsilon).then_some(PLACEHOLDER_EPSILON);
    let cfg = StudyConfig::load(cli.common.config.as_deref(), &overrides(&cli.common), fallback)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(Error::from)?;
    let out = Output {
        dir: &cfg.output_dir,
        format: cli.common.format,
    };

    match &cli.command {
        Command::Spectra => {
            let table = spectra_table(&cfg.chains)?;
            out.table("spectra", &table)?;
            let c0: Vec<_> = cfg
                .chains
                .iter()
                .map(|&j| {
                    let c = normalizing_constant_c0(j)?;
                    Ok(json!({ "J": j, "c0": c.c0, "csc2_sum": c.csc2_sum }))
                })
                .collect::<Result<_, Error>>()?;
            out.summary("spectra", &json!({ "command": "spectra", "J": cfg.chains, "c0": c0 }))?;
            println!("spectra: {} modes over J={:?}", table.len(), cfg.chains);
        }
        Command::Simulate => {
            let mut table = Table::new(&["J", "T", "seed", "convention", "R", "final_center_of_mass"]);
            for (k, &j) in cfg.chains.iter().enumerate() {
                let model = PolymerModel::new(j, cfg.horizon)
                    .with_kappa(cfg.kappa)
                    .with_convention(cfg.convention);
                let seed = derive_seed(cfg.seed, k as u64);
                let traj = model.sample(seed, cfg.drift)?;
                let csv = std::fs::File::create(out.dir.join(format!("trajectory_J{j}.csv"))).map_err(Error::from)?;
                write_trajectory_csv(&traj, std::io::BufWriter::new(csv))?;
                let bin = std::fs::File::create(out.dir.join(format!("trajectory_J{j}.bin"))).map_err(Error::from)?;
                write_trajectory_binary(&traj, std::io::BufWriter::new(bin))?;
                table.push(vec![
                    Cell::from(j),
                    Cell::from(cfg.horizon),
                    Cell::from(seed),
                    Cell::from(cfg.convention.as_str()),
                    Cell::from(radius_of_gyration(&traj)?),
                    Cell::from(center_of_mass(&traj, cfg.horizon)?),
                ])?;
            }
            out.table("simulate", &table)?;
            out.summary(
                "simulate",
                &json!({
                    "command": "simulate",
                    "J": cfg.chains,
                    "T": cfg.horizon,
                    "kappa": cfg.kappa,
                    "drift": cfg.drift,
                    "convention": cfg.convention,
                    "seed": cfg.seed,
                }),
            )?;
            println!("simulate: {} trajectories written to {}", cfg.chains.len(), out.dir.display());
        }
        Command::VarianceScan => {
            let scan = variance_scaling_scan(&cfg.chains, cfg.convention)?;
            out.table("variance_scan", &scan.to_table())?;
            out.summary(
                "variance_scan",
                &json!({ "command": "variance-scan", "summary": scan.summary, "band": scan.summary.band() }),
            )?;
            println!(
                "variance-scan ({}): ratio band {:.4} over [{:.4}, {:.4}]",
                cfg.convention,
                scan.summary.band(),
                scan.summary.min_ratio,
                scan.summary.max_ratio
            );
        }
        Command::Gibbs => {
            let run = run_gibbs(&cfg)?;
            out.table("gibbs", &run.to_table())?;
            emit_report(&run.ensemble_table(), Format::Jsonl, &out.dir.join("gibbs_ensemble.jsonl"))?;
            if !run.diagnostics.is_empty() {
                emit_report(&run.diagnostics_table(), Format::Csv, &out.dir.join("gibbs_diagnostics.csv"))?;
            }
            out.summary("gibbs", &json!({ "command": "gibbs", "rows": run.rows }))?;
            for r in &run.rows {
                println!(
                    "gibbs J={} T={}: E[R]={:.6} +- {:.6}, sampler {}",
                    r.chain, r.horizon, r.r_mean, r.r_se, r.sampler
                );
            }
        }
        Command::Ldp => {
            let rep = run_ldp(&cfg)?;
            out.table("ldp", &rep.to_table())?;
            let underpowered = rep.rows.iter().filter(|r| r.underpowered).count();
            out.summary(
                "ldp",
                &json!({
                    "command": "ldp",
                    "convention": rep.convention,
                    "rows": rep.rows.len(),
                    "underpowered_probes": underpowered,
                    "skipped_modes": rep.skipped,
                }),
            )?;
            println!("ldp: {} rows, {underpowered} underpowered probes", rep.rows.len());
        }
        Command::Scaling => {
            let rep = run_scaling_study(&cfg)?;
            out.table("scaling", &rep.to_table())?;
            out.summary("scaling", &serde_json::to_value(&rep).map_err(std::io::Error::from).map_err(Error::from)?)?;
            println!(
                "scaling ({}): exponent {:.4} +- {:.4}{}",
                rep.convention,
                rep.fitted_exponent,
                rep.exponent_se,
                rep.exact_exponent.map(|e| format!(", closed form {e:.4}")).unwrap_or_default()
            );
        }
        Command::Tails { k1, k2 } => {
            let (k1, k2) = match (k1.or(cfg.k1), k2.or(cfg.k2)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Config("tails needs k1 and k2 (config keys or --k1/--k2)".into()).into()),
            };
            let rep = run_tail_probes(&cfg, k1, k2)?;
            out.table("tails", &rep.to_table())?;
            out.summary("tails", &serde_json::to_value(&rep).map_err(std::io::Error::from).map_err(Error::from)?)?;
            println!("tails: nonincreasing in T for every J: {}", rep.all_nonincreasing());
        }
        Command::Validate => {
            let options = ValidationOptions {
                seed: cfg.seed,
                epsilon: cfg.epsilon,
            };
            let rep = run_validation_suite(&options);
            emit_report(&rep.to_table(), Format::Jsonl, &out.dir.join("validate.jsonl"))?;
            let failures: Vec<String> = rep.failures().iter().map(|o| format!("{}/{}: {}", o.module, o.name, o.detail)).collect();
            out.summary(
                "validate",
                &json!({ "command": "validate", "checks": rep.outcomes.len(), "passed": rep.passed(), "failures": failures }),
            )?;
            if !failures.is_empty() {
                return Err(Failure::Invariant(failures.join("\n")));
            }
            println!("validate: {} checks, no failures", rep.outcomes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Invariant(list) => eprintln!("invariant failures:\n{list}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}
