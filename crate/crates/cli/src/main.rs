//! Command-line front end: `run`, `mesh` and `diag`.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numerical
//! blow-up. `CUTCELL_WORKERS` overrides the worker count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cutcell::harness::{self, output};
use cutcell::Error;

#[derive(Parser)]
#[command(name = "cutcell", version, about = "Cut-cell nonhydrostatic atmosphere solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation described by a key = value configuration file.
    Run { config: PathBuf },
    /// Print the mesh and geometry report for a configuration.
    Mesh { config: PathBuf },
    /// Diagnostics on a finished run directory.
    Diag(DiagArgs),
}

#[derive(Args)]
struct DiagArgs {
    run_dir: PathBuf,
    #[command(flatten)]
    what: DiagWhat,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DiagWhat {
    /// Lee wavelength on the centreline at `z=<metres>`.
    #[arg(long, value_name = "z=<m>")]
    wavelength: Option<String>,
    /// u and w error norms against `ref=<run-dir>` above the hill top.
    #[arg(long, value_name = "ref=<dir>")]
    norms: Option<String>,
    /// CSV slice of the latest snapshot on `plane=<x|y|z>=<metres>`.
    #[arg(long, value_name = "plane=<spec>")]
    slice: Option<String>,
}

fn value_of<'a>(arg: &'a str, key: &str) -> Result<&'a str, Error> {
    arg.strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .ok_or_else(|| Error::Config(format!("expected {key}=..., got {arg:?}")))
}

fn diag(a: &DiagArgs) -> Result<(), Error> {
    if let Some(w) = &a.what.wavelength {
        let z: f64 = value_of(w, "z")?
            .parse()
            .map_err(|_| Error::Config(format!("invalid height in {w:?}")))?;
        match harness::run_wavelength(&a.run_dir, z)? {
            Some(l) => println!("wavelength {l:.1} m at z={z} m"),
            None => println!("wavelength undetectable at z={z} m"),
        }
    } else if let Some(r) = &a.what.norms {
        let [(u1, u2), (w1, w2)] = harness::compare_runs(&a.run_dir, &PathBuf::from(value_of(r, "ref")?))?;
        println!("u L1 {u1:.6e} L2 {u2:.6e}");
        println!("w L1 {w1:.6e} L2 {w2:.6e}");
    } else if let Some(p) = &a.what.slice {
        let plane = output::Plane::parse(value_of(p, "plane")?)?;
        let snap = harness::latest_snapshot(&a.run_dir)?;
        print!("{}", output::slice_csv(&snap.slice(plane)));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run { config } => harness::load_run(config).and_then(|(spec, cfg)| {
            let s = harness::run(&spec, &cfg)?;
            println!(
                "done: {} steps, dt {} s, t {} s, max|w| {:.3e} m/s, mass drift {:.3e}, free-slip residual {:.1e}, {:.1} s",
                s.steps, s.dt, s.time, s.max_w, s.mass_drift, s.free_slip, s.wall
            );
            println!("output in {}", spec.output_dir.display());
            Ok(())
        }),
        Cmd::Mesh { config } => harness::load_run(config).and_then(|(spec, _)| {
            print!("{}", harness::mesh(&spec)?);
            Ok(())
        }),
        Cmd::Diag(a) => diag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_blow_up() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
