use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use streamopt_bench::runner::{self, InvariantFailed};
use streamopt_bench::scenario::{Buffer, Kind, Scenario};
use streamopt_bench::{selftest, tables};

#[derive(Parser, Debug)]
#[command(name = "streamopt", version, about = "Run streaming solver experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the scenario's list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Buffer size: a positive integer or `full`.
    #[arg(long, global = true)]
    buffer: Option<Buffer>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of frames of the generated problem.
    #[arg(long, global = true)]
    frames: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate, solve, check and write artifacts.
    Run {
        kind: Option<Kind>,
        /// Buffer sizes to compare against the reference solution.
        #[arg(long, value_delimiter = ',')]
        buffer_sweep: Vec<usize>,
    },
    /// Print the lag table of a full-buffer least-squares run.
    LagTable {
        kind: Option<Kind>,
        /// Read `history.csv` from an existing run directory instead of running.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Maximum frame error against the reference for a range of buffer sizes.
    BufferSweep {
        kind: Option<Kind>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        buffers: Vec<usize>,
    },
    /// Print the conditioning and rate constants of a scenario.
    Conditioning { kind: Option<Kind> },
    /// Run the built-in consistency checks.
    Selftest,
}

fn scenario(o: &Overrides, kind: Option<Kind>) -> anyhow::Result<Scenario> {
    let mut sc = match &o.config {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default(),
    };
    if let Some(k) = kind {
        sc.kind = k;
    }
    if let Some(seed) = o.seed {
        sc.seeds = vec![seed];
    }
    if let Some(b) = o.buffer {
        sc.buffer = b;
    }
    if let Some(out) = &o.out {
        sc.out = out.clone();
    }
    if let Some(f) = o.frames {
        sc.set_frames(f);
    }
    sc.validate()?;
    Ok(sc)
}

fn print_runs(results: &[(u64, streamopt_bench::Summary)]) {
    for (i, (_, s)) in results.iter().enumerate() {
        if i > 0 {
            println!();
        }
        print!("{}", s.to_text());
    }
}

fn print_lag_table(dir: &Path) -> anyhow::Result<()> {
    let table = tables::lag_table_from_dir(dir)?;
    table.write_csv(std::fs::File::create(dir.join("lag_table.csv"))?)?;
    print!("{}", table.to_text());
    for lag in 1..=3 {
        match table.lag_median(lag) {
            Some(m) => println!("median lag {lag}: {m:.2}"),
            None => println!("median lag {lag}: -"),
        }
    }
    Ok(())
}

fn print_sweep(dir: &Path) -> anyhow::Result<()> {
    let path = dir.join("sweep.csv");
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    println!("{:>6}  {:>12}", "B", "max error");
    for rec in r.records() {
        let rec = rec?;
        let err: f64 = rec[1].parse()?;
        println!("{:>6}  {:>12.3e}", &rec[0], err);
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { kind, buffer_sweep } => {
            let mut sc = scenario(&cli.overrides, kind)?;
            if !buffer_sweep.is_empty() {
                sc.buffer_sweep = buffer_sweep;
            }
            print_runs(&runner::run(&sc)?);
        }
        Command::LagTable { kind, from } => match from {
            Some(dir) => print_lag_table(&dir)?,
            None => {
                let mut sc = scenario(&cli.overrides, kind)?;
                if sc.kind == Kind::NhppNoa {
                    bail!("lag tables are built from least-squares runs");
                }
                sc.buffer = Buffer::Full;
                sc.seeds.truncate(1);
                runner::run(&sc)?;
                print_lag_table(&sc.run_dir(sc.seeds[0]))?;
            }
        },
        Command::BufferSweep { kind, buffers } => {
            let mut sc = scenario(&cli.overrides, kind)?;
            sc.buffer_sweep = buffers;
            sc.validate()?;
            for (seed, s) in runner::run(&sc)? {
                println!("seed {seed}");
                print_sweep(&sc.run_dir(seed))?;
                for key in ["sweep_slope", "sweep_slope_bound"] {
                    if let Some(v) = s.get(key) {
                        println!("{key} = {v}");
                    }
                }
            }
        }
        Command::Conditioning { kind } => {
            let sc = scenario(&cli.overrides, kind)?;
            for (i, &seed) in sc.seeds.iter().enumerate() {
                if i > 0 {
                    println!();
                }
                print!("{}", runner::conditioning(&sc, seed)?.to_text());
            }
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(c) = checks.iter().find(|c| !c.passed) {
                return Err(InvariantFailed {
                    name: c.name,
                    detail: c.detail.clone(),
                }
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STREAMOPT_LOG", "warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(inv) = e.chain().find_map(|c| c.downcast_ref::<InvariantFailed>()) {
                eprintln!("failed invariant: {}", inv.name);
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
