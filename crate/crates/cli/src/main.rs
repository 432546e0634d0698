use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use consol_core::oracle::{
    alpha_star_series, check_boundedness_sampled, critical_point_scan, fd_validate, non_maximum, FdOptions,
    GridSpec,
};
use consol_core::plot::{alpha_timeline, xy_snapshots, PlotKind};
use consol_core::trace_io::{emit_trace, read_table_file, write_oracle_csv};
use consol_core::{catalog, load_scenario, run_closed_loop, sweep, BuiltScenario, Error, ScenarioFile};
use serde_json::json;

/// Simulate and inspect consolidated output-constraint scenarios.
#[derive(Parser)]
#[command(name = "consol", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write trace.csv, manifest.json and events.log.
    Simulate {
        /// Scenario file, or `builtin:<name>`.
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Override a scenario entry before building, e.g. `--set consolidation.nu=20`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Grid maximum of alpha over the scenario horizon.
    Oracle {
        scenario: String,
        /// `lo1,lo2,...:hi1,hi2,...:resolution`; defaults to the scenario region.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        /// Spacing of the sampled times.
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks, boundedness sampling and a critical-point scan.
    Validate {
        scenario: String,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Time at which the sampled diagnostics are taken.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
    },
    /// Render an SVG from a trace CSV.
    Plot {
        trace: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        /// Oracle CSV to overlay on alpha_timeline.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Scenario whose constraint set is contoured by xy_snapshots.
        #[arg(long)]
        scenario: Option<String>,
        /// Comma-separated snapshot times for xy_snapshots.
        #[arg(long, default_value = "0,3,10")]
        times: String,
    },
    /// One run per `--patch`; keys within a patch are separated by `;`.
    Sweep {
        scenario: String,
        #[arg(long, value_name = "KEY=VALUE[;KEY=VALUE...]")]
        patch: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the built-in scenarios.
    Builtins,
}

const EXIT_INPUT: u8 = 2;
const EXIT_ABORTED: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Singularity { .. } => EXIT_ABORTED,
        e if e.is_input_error() => EXIT_INPUT,
        _ => EXIT_IO,
    }
}

fn parse_assignment(s: &str) -> Result<(String, String), Error> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("`{s}` is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn load(source: &str, set: &[String]) -> Result<(ScenarioFile, BuiltScenario), Error> {
    let file = load_scenario(source)?;
    let patches = set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
    let file = file.with_patches(&patches)?;
    let built = file.build()?;
    Ok((file, built))
}

fn parse_list(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("`{v}` is not a number")))
        })
        .collect()
}

fn parse_grid(spec: &str) -> Result<GridSpec, Error> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Usage("grid must look like lo1,lo2:hi1,hi2:resolution".into()));
    }
    let res = parts[2]
        .parse()
        .map_err(|_| Error::Usage(format!("`{}` is not a resolution", parts[2])))?;
    GridSpec::new(parse_list(parts[0])?, parse_list(parts[1])?, res)
}

fn region(built: &BuiltScenario) -> Result<GridSpec, Error> {
    built
        .region
        .clone()
        .ok_or_else(|| Error::Usage("scenario has no [region]; pass --grid".into()))
}

fn simulate(scenario: &str, out: &Path, set: &[String]) -> Result<u8, Error> {
    let (_, built) = load(scenario, set)?;
    let trace = run_closed_loop(&built.scenario)?;
    emit_trace(&trace, out, &built.resolved)?;
    println!("{}: {} records -> {}", trace.name, trace.records.len(), out.display());
    if let Some(e) = trace.events.last() {
        eprintln!("aborted at t = {}: {} ({})", e.t, e.kind, e.detail);
        return Ok(EXIT_ABORTED);
    }
    Ok(0)
}

fn oracle(scenario: &str, grid: Option<&str>, dt: f64, out: &Path) -> Result<u8, Error> {
    let (_, built) = load(scenario, &[])?;
    let grid = match grid {
        Some(g) => parse_grid(g)?,
        None => region(&built)?,
    };
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::Usage("--dt must be > 0".into()));
    }
    let horizon = built.scenario.integration.horizon;
    let count = (horizon / dt).floor() as usize;
    let times: Vec<f64> = (0..=count).map(|k| k as f64 * dt).collect();
    let stars = alpha_star_series(&built.scenario.cons, &times, &grid)?;
    write_oracle_csv(&times, &stars, grid.dim(), fs::File::create(out)?)?;
    let edge = stars.iter().filter(|s| s.on_boundary).count();
    if edge > 0 {
        eprintln!("warning: argmax within one cell of the grid edge at {edge} of {} times", stars.len());
    }
    println!("{} times -> {}", times.len(), out.display());
    Ok(0)
}

fn validate(scenario: &str, samples: usize, t: f64) -> Result<u8, Error> {
    let (_, built) = load(scenario, &[])?;
    let cons = &built.scenario.cons;
    let grid = region(&built)?;
    let mut opts = FdOptions::new(grid.lo.clone(), grid.hi.clone(), (0.0, built.scenario.integration.horizon));
    opts.samples = samples;
    let fd = fd_validate(cons, &opts)?;
    println!(
        "finite differences ({} samples): alpha gradient {:.2e}, time partial {:.2e}, hessian {:.2e}",
        fd.samples, fd.alpha.gradient, fd.alpha.time_partial, fd.alpha.hessian
    );
    for (name, e) in &fd.channels {
        println!(
            "  {name}: gradient {:.2e}, time partial {:.2e}, hessian {:.2e}",
            e.gradient, e.time_partial, e.hessian
        );
    }
    let extent = grid
        .lo
        .iter()
        .chain(&grid.hi)
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let radii: Vec<f64> = (0..8).map(|k| extent * 2f64.powi(k - 1)).collect();
    let b = check_boundedness_sampled(cons, t, &radii, 64)?;
    if b.likely_unbounded() {
        println!("boundedness: -alpha stops growing along {} sampled directions", b.flagged.len());
    } else {
        println!("boundedness: no unbounded direction found");
    }
    let scan_grid = GridSpec::new(grid.lo.clone(), grid.hi.clone(), grid.resolution.min(101))?;
    let cps = critical_point_scan(cons, t, &scan_grid)?;
    let bad = non_maximum(&cps);
    println!("critical points at t = {t}: {} found, {} not maxima", cps.len(), bad.len());
    for p in bad {
        println!("  {:?} at {:?}, eigenvalues {:?}", p.kind, p.point, p.eigenvalues);
    }
    if fd.pass() {
        println!("finite differences: pass");
        Ok(0)
    } else {
        println!("finite differences: FAIL ({})", fd.failures.join(", "));
        Ok(EXIT_INPUT)
    }
}

fn plot(
    trace: &Path,
    kind: &str,
    out: &Path,
    oracle: Option<&Path>,
    scenario: Option<&str>,
    times: &str,
) -> Result<u8, Error> {
    let kind: PlotKind = kind.parse()?;
    let table = read_table_file(trace)?;
    let svg = match kind {
        PlotKind::AlphaTimeline => {
            let o = oracle.map(read_table_file).transpose()?;
            alpha_timeline(&table, o.as_ref())?
        }
        PlotKind::XySnapshots => {
            let source = scenario.ok_or_else(|| Error::Usage("xy_snapshots needs --scenario".into()))?;
            let (_, built) = load(source, &[])?;
            let g = region(&built)?;
            if g.dim() != 2 {
                return Err(Error::Usage("xy_snapshots needs a planar constraint set".into()));
            }
            xy_snapshots(
                &table,
                &built.scenario.cons,
                &parse_list(times)?,
                (g.lo[0], g.lo[1]),
                (g.hi[0], g.hi[1]),
            )?
        }
    };
    fs::write(out, svg)?;
    println!("{}", out.display());
    Ok(0)
}

fn run_sweep(scenario: &str, patch: &[String], out: &Path) -> Result<u8, Error> {
    let base = load_scenario(scenario)?;
    let patches = patch
        .iter()
        .map(|p| {
            p.split(';')
                .filter(|s| !s.trim().is_empty())
                .map(parse_assignment)
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out)?;
    let results = sweep(&base, &patches);
    let mut summary = Vec::new();
    let mut worst = 0;
    for (k, (p, r)) in patch.iter().zip(results).enumerate() {
        let dir = out.join(format!("run_{k:03}"));
        let entry = match r {
            Ok(trace) => {
                emit_trace(&trace, &dir, &Default::default())?;
                if trace.is_aborted() {
                    worst = worst.max(EXIT_ABORTED);
                }
                json!({"patch": p, "status": if trace.is_aborted() { "aborted" } else { "completed" }, "dir": dir.file_name().unwrap().to_string_lossy()})
            }
            Err(e) => {
                eprintln!("patch `{p}`: {e}");
                worst = worst.max(exit_code(&e));
                json!({"patch": p, "status": "error", "error": e.to_string()})
            }
        };
        summary.push(entry);
    }
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{} runs -> {}", summary.len(), out.display());
    Ok(worst)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Simulate { scenario, out, set } => simulate(scenario, out, set),
        Cmd::Oracle { scenario, grid, dt, out } => oracle(scenario, grid.as_deref(), *dt, out),
        Cmd::Validate { scenario, samples, t } => validate(scenario, *samples, *t),
        Cmd::Plot {
            trace,
            kind,
            out,
            oracle,
            scenario,
            times,
        } => plot(trace, kind, out, oracle.as_deref(), scenario.as_deref(), times),
        Cmd::Sweep { scenario, patch, out } => run_sweep(scenario, patch, out),
        Cmd::Builtins => {
            for name in catalog::names() {
                println!("{name}");
            }
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
