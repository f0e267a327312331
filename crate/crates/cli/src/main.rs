use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use geowind_core::config::{load_config, preset, RunConfig, Tolerances};
use geowind_core::harness::text_table;
use geowind_core::pipeline::{resolve_workers, run_certify, run_estimate, run_simulate, run_tests, WORKERS_ENV};
use geowind_core::suite::{Suite, SuiteOptions};

mod report;

#[derive(Parser, Debug)]
#[command(name = "geowind", version, about = "Winding of random-walk boundary rays: simulate, estimate, test, certify, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset into `--out` (or the config's `output`).
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate λ, e_ν and A_ν from a simulated dataset.
    Estimate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the selected limit-law tests. With `--preset all`, run the
    /// acceptance suite; with a config or preset, run every stage first.
    Test {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON file of tolerance overrides.
        #[arg(long)]
        tolerances: Option<PathBuf>,
    },
    /// Decide nondegeneracy of `A_ν` from the measure alone.
    Certify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a text summary and SVG plots for a tested run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled preset: srw-f2, example-anu, schottky-srw, or all.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    horizon: Option<u64>,
    /// Simulation threads; defaults to the environment, then the core count.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

impl RunArgs {
    fn has_source(&self) -> bool {
        self.config.is_some() || self.preset.is_some()
    }

    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => load_config(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => bail!("pass --config or --preset"),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.paths {
            cfg.paths = p;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn workers(&self) -> usize {
        resolve_workers(self.workers)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` when a selected test failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { run, out } => {
            let cfg = run.load()?;
            let out = output_dir(out, &cfg)?;
            let ds = run_simulate(&cfg, &out, run.workers())?;
            println!("simulated {} paths of {} steps into {}", ds.paths.len(), ds.horizon(), out.display());
            Ok(true)
        }
        Command::Estimate { out } => {
            let est = run_estimate(&out)?;
            println!("lambda = {:.5} +- {:.5}", est.lambda, est.lambda_se);
            println!("e_nu   = {:?}", est.e_nu);
            println!("A_nu   = {:?} ({})", est.a_nu, est.a_nu_source);
            Ok(true)
        }
        Command::Test { run, out, tolerances } => {
            let tol = tolerances.as_deref().map(Tolerances::load).transpose()?;
            if run.preset.as_deref() == Some("all") {
                return acceptance(&run, out.as_deref(), tol);
            }
            let out = if run.has_source() {
                let cfg = run.load()?;
                let out = output_dir(out, &cfg)?;
                run_simulate(&cfg, &out, run.workers())?;
                run_estimate(&out)?;
                out
            } else if run.seed.is_some() || run.paths.is_some() || run.horizon.is_some() {
                bail!("--seed, --paths and --horizon need --config or --preset");
            } else {
                out.context("pass --out")?
            };
            let reports = run_tests(&out, tol)?;
            print!("{}", text_table(&reports));
            Ok(reports.iter().all(|r| r.pass))
        }
        Command::Certify { run, out } => {
            let cert = run_certify(&run.load()?, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&cert)?);
            Ok(true)
        }
        Command::Report { out } => {
            let written = report::write(&out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.output.clone()).context("pass --out or set `output` in the config")
}

fn acceptance(run: &RunArgs, out: Option<&Path>, tol: Option<Tolerances>) -> Result<bool> {
    if run.paths.is_some() || run.horizon.is_some() {
        bail!("--paths and --horizon are fixed per criterion in the acceptance suite");
    }
    let mut opts = SuiteOptions { workers: run.workers(), ..SuiteOptions::default() };
    if let Some(s) = run.seed {
        opts.seed = s;
    }
    let suite = Suite::new(opts, tol.unwrap_or_default());
    let mut outcomes = Vec::new();
    for id in 1..=12 {
        let o = suite.run(id);
        println!("{}", o.line());
        outcomes.push(o);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let table: String = outcomes.iter().map(|o| o.line() + "\n").collect();
        std::fs::write(dir.join("acceptance.txt"), table)?;
        let json = serde_json::to_vec_pretty(&serde_json::json!({"options": opts, "criteria": outcomes}))?;
        std::fs::write(dir.join("acceptance.json"), json).with_context(|| format!("writing {}", dir.display()))?;
    }
    Ok(outcomes.iter().all(|o| o.pass))
}
