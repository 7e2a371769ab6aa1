//! `mgsim`: run the microgrid engines on a scenario file or shipped fixture.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure. Data
//! goes to files under `<out>/<scenario>/<engine>/`; diagnostics go to
//! standard error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use microgrid_core::equilibrium::{min_shed_search, solve_droop_equilibrium, sweep_feasibility, EquilibriumProblem};
use microgrid_core::exec::with_workers;
use microgrid_core::fixtures::{fixture, fixture_names};
use microgrid_core::output::{self, PlotSource};
use microgrid_core::scenario::Scenario;
use microgrid_core::smallsignal::gain_sweep;
use microgrid_core::system::{Fidelity, Operating};
use microgrid_core::tds::simulate;
use microgrid_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mgsim", version, about = "Islanded microgrid equilibrium, eigen and time-domain engines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time-domain simulation: trace CSV and events JSON.
    Simulate(RunArgs),
    /// Droop equilibrium: bus and inverter tables.
    Equilibrium(RunArgs),
    /// Feasibility maps over load factors, with minimum shed.
    Feasibility(RunArgs),
    /// Gain sweeps: spectrum CSV and crossing summary.
    Eigen(RunArgs),
    /// Parse and cross-check a scenario, then print a model summary.
    Validate(Source),
    /// Names of the shipped fixtures.
    ListFixtures,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SourceGroup {
    /// Shipped fixture name (see `list-fixtures`).
    #[arg(long)]
    fixture: Option<String>,
    /// Scenario JSON file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Source {
    #[command(flatten)]
    src: SourceGroup,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    src: SourceGroup,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps; 1 is fully sequential.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Integration step override (s).
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, value_enum)]
    fidelity: Option<FidelityArg>,
    /// Reserved; every engine is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Plot-data layout, e.g. fig9-style (trace), fig6-style (map), fig7-style (eigen).
    #[arg(long)]
    layout: Option<String>,
    /// Comma-separated load factors for `feasibility`.
    #[arg(long, value_delimiter = ',')]
    load_factors: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FidelityArg {
    Full,
    Reduced,
}

impl From<FidelityArg> for Fidelity {
    fn from(f: FidelityArg) -> Self {
        match f {
            FidelityArg::Full => Fidelity::Full,
            FidelityArg::Reduced => Fidelity::Reduced,
        }
    }
}

fn load(src: &SourceGroup) -> Result<Scenario> {
    match (&src.fixture, &src.config) {
        (Some(name), _) => fixture(name),
        (None, Some(path)) => Scenario::from_path(path),
        (None, None) => Err(Error::Config("give --fixture or --config".into())),
    }
}

/// Outcome of a subcommand that produced files.
enum Done {
    Ok,
    /// Outputs were written but the run failed numerically.
    Partial(String),
}

fn report(files: &[PathBuf]) {
    for f in files {
        log::info!("wrote {}", f.display());
    }
}

fn layout<'a>(args: &'a RunArgs, sc: &'a Scenario) -> Option<&'a str> {
    args.layout.as_deref().or(sc.output.layout.as_deref())
}

fn dir(args: &RunArgs, sc: &Scenario, engine: &str) -> PathBuf {
    output::artifact_dir(&args.out, &sc.name, engine)
}

fn cmd_simulate(args: &RunArgs) -> Result<Done> {
    let sc = load(&args.src)?;
    let mut cfg = sc.sim_config();
    if let Some(dt) = args.dt {
        cfg.dt = Some(dt);
    }
    if let Some(f) = args.fidelity {
        cfg.fidelity = f.into();
    }
    cfg.validate()?;
    let out = simulate(&sc.grid, &cfg, &sc.events)?;
    let d = dir(args, &sc, "simulate");
    report(&output::write_trace(&d, &out.trace, &out.status)?);
    if let Some(l) = layout(args, &sc) {
        let src = PlotSource::Trace {
            grid: &sc.grid,
            trace: &out.trace,
        };
        report(&output::write_plot_data(&d, l, &src)?);
    }
    Ok(if out.completed() {
        Done::Ok
    } else {
        Done::Partial(format!("simulation stopped early: {:?}", out.status))
    })
}

fn cmd_equilibrium(args: &RunArgs) -> Result<Done> {
    let sc = load(&args.src)?;
    let scale = sc.engine.equilibrium.as_ref().map_or(1.0, |e| e.load_scale);
    let eq = solve_droop_equilibrium(&EquilibriumProblem::droop(&sc.grid).with_load_scale(scale))?;
    report(&output::write_equilibrium(&dir(args, &sc, "equilibrium"), &sc.grid, &eq)?);
    Ok(Done::Ok)
}

fn cmd_feasibility(args: &RunArgs) -> Result<Done> {
    let sc = load(&args.src)?;
    let (mut lfs, opts, want_shed) = sc.sweep_options()?;
    if let Some(l) = &args.load_factors {
        lfs = l.clone();
    }
    let problem = EquilibriumProblem::droop(&sc.grid);
    let (maps, sheds) = with_workers(args.workers, |exec| -> Result<_> {
        let opts = microgrid_core::equilibrium::SweepOptions { exec, ..opts };
        let maps = sweep_feasibility(&problem, &lfs, &opts)?;
        let sheds = maps
            .iter()
            .map(|m| {
                if want_shed && m.feasible_count() == 0 {
                    min_shed_search(&problem, m.load_factor, &opts).map(Some)
                } else if want_shed {
                    Ok(Some(0.0))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((maps, sheds))
    })?;
    let d = dir(args, &sc, "feasibility");
    report(&output::write_maps(&d, &sc.grid, &maps, &sheds)?);
    if let Some(l) = layout(args, &sc) {
        let src = PlotSource::Maps {
            grid: &sc.grid,
            maps: &maps,
        };
        report(&output::write_plot_data(&d, l, &src)?);
    }
    Ok(Done::Ok)
}

fn cmd_eigen(args: &RunArgs) -> Result<Done> {
    let sc = load(&args.src)?;
    let (conds, mut opts) = sc.gain_sweep_options();
    if let Some(f) = args.fidelity {
        opts.fidelity = f.into();
    }
    let ops = Operating::from_grid(&sc.grid);
    let sweeps = with_workers(args.workers, |exec| -> Result<Vec<_>> {
        let opts = microgrid_core::smallsignal::GainSweepOptions { exec, ..opts };
        conds
            .iter()
            .map(|&c| gain_sweep(&sc.grid, &ops, c, &opts).map(|r| (c, r)))
            .collect()
    })?;
    let d = dir(args, &sc, "eigen");
    report(&output::write_sweeps(&d, &sweeps)?);
    if let Some(l) = layout(args, &sc) {
        report(&output::write_plot_data(&d, l, &PlotSource::Sweeps(&sweeps))?);
    }
    let failed: Vec<String> = sweeps.iter().filter_map(|(_, r)| r.diagnostic.clone()).collect();
    Ok(if failed.is_empty() {
        Done::Ok
    } else {
        Done::Partial(failed.join("; "))
    })
}

fn cmd_validate(src: &Source) -> Result<Done> {
    let sc = load(&src.src)?;
    let net = &sc.grid.network;
    println!("scenario {}", sc.name);
    if !sc.description.is_empty() {
        println!("  {}", sc.description);
    }
    println!(
        "  base {} MVA, {} kV, {} Hz",
        net.base.s_base / 1e6,
        net.base.v_base / 1e3,
        net.base.f_base
    );
    println!(
        "  {} buses, {} branches, {} loads",
        net.buses.len(),
        net.branches.len(),
        net.buses.iter().filter(|b| b.load.is_some()).count()
    );
    for (k, u) in sc.grid.inverters.iter().enumerate() {
        println!(
            "  inverter {} ({}) at bus {}: k_df {}, k_dv {}, s_ref {} p.u.",
            u.id,
            sc.inverter_label(k),
            u.bus,
            u.params.k_df,
            u.params.k_dv,
            u.power_reg.s_ref
        );
    }
    println!("  {} scheduled events", sc.events.len());
    let e = &sc.engine;
    let engines: Vec<&str> = [
        ("simulate", e.simulate.is_some()),
        ("equilibrium", e.equilibrium.is_some()),
        ("feasibility", e.feasibility.is_some()),
        ("eigen", e.eigen.is_some()),
    ]
    .iter()
    .filter(|(_, on)| *on)
    .map(|(n, _)| *n)
    .collect();
    println!("  engines: {}", if engines.is_empty() { "defaults".into() } else { engines.join(", ") });
    Ok(Done::Ok)
}

fn check_layout(args: &RunArgs) -> Result<()> {
    match &args.layout {
        Some(l) if !output::LAYOUTS.contains(&l.as_str()) => Err(Error::UnknownLayout(l.clone())),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<Done> {
    if let Command::Simulate(a) | Command::Equilibrium(a) | Command::Feasibility(a) | Command::Eigen(a) = &cli.command {
        check_layout(a)?;
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Equilibrium(a) => cmd_equilibrium(a),
        Command::Feasibility(a) => cmd_feasibility(a),
        Command::Eigen(a) => cmd_eigen(a),
        Command::Validate(s) => cmd_validate(s),
        Command::ListFixtures => {
            for n in fixture_names() {
                println!("{n}");
            }
            Ok(Done::Ok)
        }
    }
}

fn exit_code(r: Result<Done>) -> u8 {
    match r {
        Ok(Done::Ok) => 0,
        Ok(Done::Partial(msg)) => {
            eprintln!("mgsim: numerical failure (partial outputs written): {msg}");
            2
        }
        Err(e) => {
            eprintln!("mgsim: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(exit_code(run(cli)))
}
