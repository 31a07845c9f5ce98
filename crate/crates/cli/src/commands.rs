use crate::args::{KernelsArgs, Level, RunArgs, ValidateArgs};
use crate::report::{OutputFile, RunReport, REPORT_SCHEMA};
use crowdflux::fluid::{
    cfl_dt, Closure, ClosureKind, FieldSet, FluidConfig, FluidSolver, MassLedger,
};
use crowdflux::hydro::{write_hydro_csv, HydroSolver};
use crowdflux::kernels::{psi_monte_carlo, tabulate};
use crowdflux::particles::{run, RunControls, StreamSink};
use crowdflux::scenario::Scenario;
use crowdflux::validation::Validator;
use crowdflux::{AvoidanceParams, KernelTable, QuadratureSpec, Side};
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(String),
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Validation(_) => 4,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Solver(m) => write!(f, "solver error: {m}"),
            CliError::Validation(m) => write!(f, "validation failed: {m}"),
        }
    }
}

fn config(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

fn solver(e: impl Display) -> CliError {
    CliError::Solver(e.to_string())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Solver(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_at(path))
}

/// Kernel table path in the output directory of `crowdflux kernels`.
pub const KERNELS_FILE: &str = "kernels.csv";

/// Relative tolerance of `kernels --check`.
const MC_TOLERANCE: f64 = 0.01;

pub fn kernels(args: &KernelsArgs) -> Result<(), CliError> {
    let params = match &args.scenario {
        Some(p) => Scenario::from_path(p).map_err(config)?.params.avoidance,
        None => AvoidanceParams::default(),
    };
    if args.nodes < 2 {
        return Err(config("--nodes must be at least 2"));
    }
    create_dir(&args.out)?;
    let path = args.out.join(KERNELS_FILE);
    let start = Instant::now();
    let table = if args.zero {
        KernelTable::zero()
    } else {
        tabulate(&params, &QuadratureSpec::default(), args.nodes).map_err(solver)?
    };
    table.write(&path).map_err(solver)?;
    log::info!(
        "wrote {} ({} nodes, {:.2} s)",
        path.display(),
        table.s_grid.len(),
        start.elapsed().as_secs_f64()
    );
    if args.check {
        let mut failed = Vec::new();
        for (i, s) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            let mc = psi_monte_carlo(
                s,
                0.7 * i as f64,
                Side::Both,
                &params,
                40_000_000,
                31 + i as u64,
            )
            .map_err(solver)?;
            let value = table.eval(s, Side::Both);
            let rel = (value - mc.mean).abs() / mc.mean;
            let pass = rel <= MC_TOLERANCE;
            println!(
                "{} s={s}: table {value:.6}, monte carlo {:.6} +- {:.1e}, rel {rel:.2e}",
                if pass { "ok  " } else { "FAIL" },
                mc.mean,
                mc.std_err
            );
            if !pass {
                failed.push(format!("s={s}"));
            }
        }
        if !failed.is_empty() {
            return Err(CliError::Validation(format!(
                "table differs from Monte Carlo by more than 1% at {}",
                failed.join(", ")
            )));
        }
    }
    Ok(())
}

/// Kernel table for a run: the flag, then the scenario entry, then an
/// in-memory tabulation.
fn resolve_table(
    sc: &Scenario,
    flag: Option<&PathBuf>,
    needed: bool,
) -> Result<Option<KernelTable>, CliError> {
    let path = flag.or(sc.kernel_table.as_ref());
    match path {
        Some(p) => KernelTable::load_checked(p, &sc.params.avoidance)
            .map(Some)
            .map_err(config),
        None if needed => {
            log::info!("no kernel table given; tabulating 64 nodes in memory");
            tabulate(&sc.params.avoidance, &QuadratureSpec::default(), 64)
                .map(Some)
                .map_err(solver)
        }
        None => Ok(None),
    }
}

fn snapshot_times(t_end: f64, every: Option<f64>) -> impl Fn(f64, f64) -> bool {
    // true when a snapshot falls in (t0, t1]
    move |t0: f64, t1: f64| {
        let tol = 1e-9 * t_end.max(1.0);
        if (t1 - t_end).abs() <= tol {
            return true;
        }
        match every {
            Some(e) if e > 0.0 => ((t1 + tol) / e).floor() > ((t0 + tol) / e).floor(),
            _ => false,
        }
    }
}

pub fn run_scenario(args: &RunArgs) -> Result<(), CliError> {
    let mut sc = Scenario::from_path(&args.scenario).map_err(config)?;
    if let Some(m) = args.force_mode {
        sc.particles.force_mode = m;
    }
    if let Some(s) = args.seed {
        sc.run.seed = Some(s);
    }
    create_dir(&args.out)?;
    let start = Instant::now();
    let mut report = match args.level {
        Level::Ibm => run_ibm(&sc, args)?,
        Level::FluidMono => run_fluid(&sc, args, Closure::Monokinetic)?,
        Level::FluidVmf => run_fluid(&sc, args, Closure::Vmf)?,
        Level::Hydro => run_hydro(&sc, args)?,
    };
    report.wall_time_s = start.elapsed().as_secs_f64();
    report.write(&args.out).map_err(io_at(&args.out))?;
    log::info!(
        "{} run finished: {} steps, {} snapshots, {:.2} s",
        args.level.tag(),
        report.steps,
        report.snapshots,
        report.wall_time_s
    );
    Ok(())
}

fn empty_report(sc: &Scenario, level: Level) -> RunReport {
    RunReport {
        schema: REPORT_SCHEMA,
        level: level.tag(),
        scenario: sc.name.clone(),
        seed: None,
        wall_time_s: 0.0,
        steps: 0,
        substeps: 0,
        snapshots: 0,
        mass_ledger: Vec::new(),
        diagnostics: serde_json::Value::Null,
        outputs: Vec::new(),
    }
}

fn run_ibm(sc: &Scenario, args: &RunArgs) -> Result<RunReport, CliError> {
    let mode = sc.particles.force_mode;
    let seed = match sc.run.seed {
        Some(s) => s,
        None if sc.is_stochastic() => {
            return Err(config(
                "stochastic scenario needs a seed (/run/seed or --seed)",
            ))
        }
        None => 0,
    };
    let table = resolve_table(sc, args.kernel_table.as_ref(), mode.needs_kernel())?;
    let mut ens = sc.build_ensemble(seed).map_err(config)?;
    let nk = ens.targets.len();
    let counts = |ens: &crowdflux::Ensemble| {
        let mut c = vec![0.0; nk];
        for (i, a) in ens.agents.iter().enumerate() {
            if ens.is_active(i) {
                c[a.target_id] += 1.0;
            }
        }
        c
    };
    let initial = counts(&ens);
    let snap_path = args.out.join("snapshots.ndjson");
    let series_path = args.out.join("series.csv");
    let mut sink = StreamSink::new(create(&snap_path)?, create(&series_path)?);
    let controls = RunControls {
        t_end: sc.run.t_end,
        dt: sc.run.dt,
        snapshot_every: sc.run.snapshot_every.unwrap_or(0.0),
        max_halvings: sc.particles.max_halvings,
    };
    let stats = run(&mut ens, mode, table.as_ref(), &controls, &mut sink).map_err(solver)?;
    let (mut a, mut b) = sink.into_inner();
    a.flush().map_err(io_at(&snap_path))?;
    b.flush().map_err(io_at(&series_path))?;
    let current = counts(&ens);
    let mut report = empty_report(sc, Level::Ibm);
    report.seed = Some(seed);
    report.steps = stats.steps;
    report.substeps = stats.substeps;
    report.snapshots = stats.snapshots;
    report.mass_ledger = initial
        .iter()
        .zip(&current)
        .map(|(&i, &c)| MassLedger {
            initial: i,
            current: c,
            outflow: i - c,
            repaired: 0.0,
        })
        .collect();
    report.diagnostics = serde_json::json!({
        "force_mode": mode.name(),
        "ties": stats.ties,
        "arrivals": stats.arrivals,
        "max_turn": stats.max_turn,
    });
    report.outputs = vec![
        OutputFile {
            path: "snapshots.ndjson".into(),
            t: ens.time,
        },
        OutputFile {
            path: "series.csv".into(),
            t: ens.time,
        },
    ];
    Ok(report)
}

/// Fixed step count so that the last step lands on `t_end`.
fn uniform_steps(t_end: f64, limit: f64) -> (usize, f64) {
    let n = (t_end / limit - 1e-9).ceil().max(1.0) as usize;
    (n, t_end / n as f64)
}

fn run_fluid(sc: &Scenario, args: &RunArgs, closure: Closure) -> Result<RunReport, CliError> {
    let level = match closure {
        Closure::Monokinetic => Level::FluidMono,
        Closure::Vmf => Level::FluidVmf,
    };
    let grid = sc.grid().map_err(config)?;
    let kind = ClosureKind {
        closure,
        variant: sc.fluid.variant,
    };
    let table = resolve_table(sc, args.kernel_table.as_ref(), sc.fluid.variant.is_local())?;
    let mut cfg = FluidConfig::new(kind, sc.params);
    cfg.density_ceiling = sc.fluid.density_ceiling;
    cfg.force_nodes = sc.fluid.force_nodes;
    let mut solver_ = FluidSolver::new(grid, sc.target_points(), cfg, table).map_err(config)?;
    let mut fields = sc.build_fields(closure).map_err(config)?;
    solver_.start_ledger(&fields);
    let (n, h) = uniform_steps(sc.run.t_end, cfl_dt(&grid, sc.run.cfl, sc.params.speed()));
    let due = snapshot_times(sc.run.t_end, sc.run.snapshot_every);
    let mut outputs = Vec::new();
    let write =
        |fields: &FieldSet, t: f64, outputs: &mut Vec<OutputFile>| -> Result<(), CliError> {
            let name = format!("fields_{:04}.csv", outputs.len());
            let path = args.out.join(&name);
            let mut w = create(&path)?;
            crowdflux::fluid::write_fields_csv(&mut w, &grid, fields).map_err(io_at(&path))?;
            w.flush().map_err(io_at(&path))?;
            outputs.push(OutputFile { path: name, t });
            Ok(())
        };
    write(&fields, 0.0, &mut outputs)?;
    for s in 0..n {
        solver_.step(&mut fields, h).map_err(solver)?;
        let (t0, t1) = (s as f64 * h, (s + 1) as f64 * h);
        if due(t0, t1) {
            write(&fields, t1, &mut outputs)?;
        }
    }
    let diag = solver_.diagnostics();
    if diag.clip_events > 0 {
        log::warn!(
            "{} cells had |U| clipped; the closure is outside its validity regime",
            diag.clip_events
        );
    }
    let mut report = empty_report(sc, level);
    report.steps = diag.steps;
    report.substeps = diag.steps;
    report.snapshots = outputs.len() as u64;
    report.mass_ledger = diag.ledger.clone();
    report.diagnostics = serde_json::json!({
        "variant": sc.fluid.variant,
        "dt": h,
        "clip_events": diag.clip_events,
        "floor_events": diag.floor_events,
        "ties": diag.ties,
    });
    report.outputs = outputs;
    Ok(report)
}

fn run_hydro(sc: &Scenario, args: &RunArgs) -> Result<RunReport, CliError> {
    let grid = sc.grid().map_err(config)?;
    let table = resolve_table(sc, args.kernel_table.as_ref(), true)?.expect("table resolved");
    let mut solver_ =
        HydroSolver::new(grid, sc.target_points(), sc.params, sc.hydro, &table).map_err(config)?;
    let mut fields = sc.build_fields(Closure::Vmf).map_err(config)?;
    solver_.start_ledger(&fields);
    let (n, h) = uniform_steps(sc.run.t_end, cfl_dt(&grid, sc.run.cfl, sc.params.speed()));
    let due = snapshot_times(sc.run.t_end, sc.run.snapshot_every);
    let mut outputs = Vec::new();
    let mut write =
        |solver_: &mut HydroSolver, fields: &mut FieldSet, t: f64| -> Result<(), CliError> {
            let solves = solver_.update_velocity(fields).map_err(solver)?;
            let name = format!("hydro_{:04}.csv", outputs.len());
            let path = args.out.join(&name);
            let mut w = create(&path)?;
            write_hydro_csv(&mut w, &grid, fields, &solves).map_err(io_at(&path))?;
            w.flush().map_err(io_at(&path))?;
            outputs.push(OutputFile { path: name, t });
            Ok(())
        };
    write(&mut solver_, &mut fields, 0.0)?;
    for s in 0..n {
        solver_.step(&mut fields, h).map_err(solver)?;
        let (t0, t1) = (s as f64 * h, (s + 1) as f64 * h);
        if due(t0, t1) {
            write(&mut solver_, &mut fields, t1)?;
        }
    }
    let diag = solver_.diagnostics().clone();
    let mut report = empty_report(sc, Level::Hydro);
    report.steps = diag.steps;
    report.substeps = diag.steps;
    report.snapshots = outputs.len() as u64;
    report.mass_ledger = diag.ledger.clone();
    report.diagnostics = serde_json::json!({
        "dt": h,
        "n_theta": sc.hydro.n_theta,
        "solves": diag.solves,
        "total_iterations": diag.total_iterations,
        "max_iterations": diag.max_iterations,
        "max_residual": diag.max_residual,
        "damped_retries": diag.damped_retries,
        "nonmonotone": diag.nonmonotone,
        "zero_kernel": table.is_zero(),
    });
    report.outputs = outputs;
    Ok(report)
}

pub fn validate(args: &ValidateArgs) -> Result<(), CliError> {
    let suites = args.suites().map_err(config)?;
    let v = match &args.kernel_table {
        Some(p) => {
            let t = KernelTable::load_checked(p, &AvoidanceParams::default()).map_err(config)?;
            Validator::with_table(args.fault, t)
        }
        None => Validator::new(args.fault),
    };
    let report = v.run_all(&suites);
    for r in &report.suites {
        eprintln!(
            "{:<18} {} ({:.1} s)",
            r.suite.tag(),
            if r.pass() { "PASS" } else { "FAIL" },
            r.seconds
        );
        for c in &r.checks {
            eprintln!(
                "    {} {:<52} {:.4e} <= {:.1e}",
                if c.pass { "ok  " } else { "FAIL" },
                c.property,
                c.measured,
                c.threshold
            );
        }
    }
    let json = serde_json::to_string_pretty(&report).map_err(solver)?;
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("validation.json");
            fs::write(&path, json + "\n").map_err(io_at(&path))?;
        }
        None => println!("{json}"),
    }
    if report.pass {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .suites
            .iter()
            .flat_map(|r| {
                r.failures()
                    .into_iter()
                    .map(move |p| format!("{}/{p}", r.suite.tag()))
            })
            .collect();
        Err(CliError::Validation(failed.join(", ")))
    }
}
