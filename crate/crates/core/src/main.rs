use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use thz_onebit::linalg::{frobenius_norm, CMatrix};
use thz_onebit::precoding::{distortion_covariance, empirical_distortion_covariance, PrecoderKind};
use thz_onebit::rate::TrialStatistics;
use thz_onebit::scenario::{
    emit_csv, load_scenario, run_sweep, write_csv, BeamMode, ScenarioConfig, Simulator, SweepAxis,
    SweepRequest,
};

#[derive(Parser)]
#[command(name = "thz-sim", version, about = "One-bit precoded THz multi-user simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo rate sweep written as CSV.
    Run {
        /// Scenario TOML; the built-in reference scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_parser = ["power", "array", "subarrays"], default_value = "power")]
        sweep: String,
        /// Comma-separated axis values; defaults to the scenario power grid.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        precoder: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        beam: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Large-array rate of a scenario, averaged over trials.
    Asymptotic {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Compares the closed-form distortion covariance with a Monte Carlo estimate.
    OracleCdd {
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        users: usize,
        #[arg(long, default_value_t = 1_000_000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn scenario(path: &Option<PathBuf>) -> anyhow::Result<ScenarioConfig> {
    match path {
        Some(p) => load_scenario(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario: path,
            sweep,
            values,
            precoder,
            beam,
            trials,
            seed,
            out,
        } => {
            let mut cfg = scenario(&path)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let axis: SweepAxis = sweep.parse()?;
            let values = if values.is_empty() {
                match axis {
                    SweepAxis::Power => cfg.sweep.power_dbm.clone(),
                    _ => bail!("--values is required for the {sweep} axis"),
                }
            } else {
                values
            };
            let precoders = if precoder.is_empty() {
                vec![cfg.precoder]
            } else {
                precoder.iter().map(|s| s.parse()).collect::<Result<Vec<PrecoderKind>, _>>()?
            };
            let beams = if beam.is_empty() {
                vec![cfg.beam_mode]
            } else {
                beam.iter().map(|s| s.parse()).collect::<Result<Vec<BeamMode>, _>>()?
            };
            let sim = Simulator::new(cfg.clone())?;
            for w in &sim.allocation().warnings {
                eprintln!("warning: {w}");
            }
            let started = Instant::now();
            let table = run_sweep(
                &cfg,
                &SweepRequest {
                    axis,
                    values,
                    precoders,
                    beams,
                },
            )?;
            eprintln!("{} rows in {:.1} s", table.rows.len(), started.elapsed().as_secs_f64());
            match out {
                Some(p) => emit_csv(&table, &p)?,
                None => write_csv(&table, std::io::stdout().lock())?,
            }
        }
        Command::Asymptotic { scenario: path, trials } => {
            let mut cfg = scenario(&path)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let sim = Simulator::new(cfg)?;
            for w in &sim.allocation().warnings {
                eprintln!("warning: {w}");
            }
            let results: Vec<_> = (0..sim.config().trials)
                .map(|t| {
                    let draw = sim.draw(t);
                    thz_onebit::rate::asymptotic_rate(&sim.asymptotic_scenario(&draw)?)
                })
                .collect::<Result<_, _>>()?;
            println!("user,asymptotic_rate_bps");
            for &u in sim.user_ids() {
                let s: Vec<f64> = results.iter().map(|r| r.per_user.get(&u).copied().unwrap_or(0.0)).collect();
                println!("{u},{:e}", TrialStatistics::from_samples(&s).mean);
            }
            let total: Vec<f64> = results.iter().map(|r| r.total).collect();
            println!("total,{:e}", TrialStatistics::from_samples(&total).mean);
        }
        Command::OracleCdd { k, users, trials, seed } => {
            if users == 0 || k < users || trials == 0 {
                bail!("need 0 < users <= k and trials > 0");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = CMatrix::from_fn(k, users, |_, _| {
                Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))
            });
            let power = 1.0;
            let analytic = distortion_covariance(&q, power, k)?;
            let started = Instant::now();
            let empirical = empirical_distortion_covariance(&q, power, k, trials, &mut rng)?;
            let err = frobenius_norm(&(&empirical - &analytic)) / frobenius_norm(&analytic);
            println!("K={k} U={users} trials={trials} relative_frobenius_error={err:e}");
            eprintln!("{:.2} s", started.elapsed().as_secs_f64());
        }
    }
    Ok(())
}
