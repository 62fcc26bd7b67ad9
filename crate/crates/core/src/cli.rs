//! Command-line front end: argument parsing, run orchestration, report files
//! and exit codes.
//!
//! Exit codes: 0 success, 1 configuration or runtime error, 2 a checked
//! condition failed (smallness conditions in `check`, relaxation verdict in
//! `relax`), 3 the fixed-point iteration did not converge.

use crate::bounds::check_conditions;
use crate::characteristics::{Clock, State, Tracer};
use crate::config::{desk_scenario, load_config, Prepared, RunConfig};
use crate::error::{Error, Result};
use crate::oracle;
use crate::solver::{picard_solve, with_threads, DensityField, Inflow, Mode, PicardLog, Problem};
use crate::steady::{relaxation_study, stationary_solve};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;

/// Relative slack on the sup bound asserted after `solve`.
const BOUND_SLACK: f64 = 1.01;
/// Node tolerance for the positivity and support invariants.
const NODE_TOL: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(
    name = "stratocoag",
    version,
    about = "Droplet coagulation-condensation transport in a horizontal strip"
)]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "STRATOCOAG_THREADS", value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Write the default desk scenario to `--config` (or `<output>/scenario.json`) and run on it.
    #[arg(long, global = true)]
    pub seed_scenario: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the a-priori constants and test the smallness conditions.
    Check,
    /// Solve the transient problem.
    Solve(SolveArgs),
    /// Solve the stationary problem.
    Steady(SolveArgs),
    /// Relaxation of the transient solution to the stationary one.
    Relax(RelaxArgs),
    /// Trace characteristics through given `(t, x3, m)` points.
    Trace(TraceArgs),
    /// Oracle comparisons and measured convergence orders.
    Compare,
}

#[derive(Debug, Args, Clone, Default)]
pub struct SolveArgs {
    /// Fixed-point tolerance.
    #[arg(long)]
    pub tol_fix: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// `global` or `strip`.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub strip_width: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RelaxArgs {
    #[command(flatten)]
    pub solver: SolveArgs,
    /// Final distance that counts as relaxed.
    #[arg(long)]
    pub relax_tol: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TraceArgs {
    /// Start point `t,x3,m` (repeatable; replaces `trace.points`).
    #[arg(long = "point", value_parser = parse_point)]
    pub points: Vec<[f64; 3]>,
    /// Characteristic step.
    #[arg(long)]
    pub ds: Option<f64>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "global" => Ok(Mode::Global),
        "strip" => Ok(Mode::Strip),
        _ => Err(format!("unknown mode {s:?} (expected global or strip)")),
    }
}

fn parse_point(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected t,x3,m, got {s:?}"))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Solve(_) => "solve",
            Command::Steady(_) => "steady",
            Command::Relax(_) => "relax",
            Command::Trace(_) => "trace",
            Command::Compare => "compare",
        }
    }
}

/// Report plus exit code of a finished subcommand.
struct Outcome {
    report: Value,
    code: i32,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NoConvergence { .. } => EXIT_NO_CONVERGENCE,
        _ => EXIT_ERROR,
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    let started = Instant::now();
    let (config, out_dir) = match prepare(&cli) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            let dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("out"));
            let report = json!({ "command": name, "status": "error", "error": e.to_string() });
            if std::fs::create_dir_all(&dir).is_ok() {
                let _ = write_json(&dir.join(format!("{name}.json")), &report);
            }
            return EXIT_ERROR;
        }
    };
    let result = with_threads(cli.threads, || dispatch(&cli.command, &config, &out_dir)).and_then(|r| r);
    let (mut report, code) = match result {
        Ok(o) => (o.report, o.code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            let mut report = json!({ "status": "error", "error": e.to_string() });
            if let Error::NoConvergence {
                iterations,
                last_difference,
            } = e
            {
                report["status"] = json!("no_convergence");
                report["iterations"] = json!(iterations);
                report["last_difference"] = json!(last_difference);
            }
            (report, code)
        }
    };
    report["command"] = json!(name);
    report["exit_code"] = json!(code);
    report["config"] = serde_json::to_value(config.resolved()).unwrap_or(Value::Null);
    if let Err(e) = write_json(&out_dir.join(format!("{name}.json")), &report) {
        eprintln!("error: writing report: {e}");
        return EXIT_ERROR;
    }
    let timings = json!({
        "command": name,
        "seconds": started.elapsed().as_secs_f64(),
        "threads": cli.threads.unwrap_or_else(rayon::current_num_threads),
    });
    if let Err(e) = write_json(&out_dir.join("timings.json"), &timings) {
        warn!("could not write timings: {e}");
    }
    code
}

/// Seeds the scenario if asked, loads the configuration and creates the
/// output directory.
fn prepare(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let seed_dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("out"));
    let path = if cli.seed_scenario {
        let path = cli.config.clone().unwrap_or_else(|| seed_dir.join("scenario.json"));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        write_json(&path, &desk_scenario())?;
        info!("wrote desk scenario to {}", path.display());
        path
    } else {
        cli.config
            .clone()
            .ok_or_else(|| Error::Parse("--config PATH is required (or pass --seed-scenario)".into()))?
    };
    let mut config = load_config(&path)?;
    apply_overrides(&cli.command, &mut config)?;
    let out_dir = cli.output.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir));
    std::fs::create_dir_all(&out_dir)?;
    Ok((config, out_dir))
}

fn apply_overrides(command: &Command, config: &mut RunConfig) -> Result<()> {
    let mut errors = Vec::new();
    let mut positive = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("--{name}: must be finite and > 0"));
            }
        }
    };
    let solver = match command {
        Command::Solve(a) | Command::Steady(a) => Some(a),
        Command::Relax(a) => {
            positive("relax-tol", a.relax_tol);
            if let Some(v) = a.relax_tol {
                config.relax.tolerance = v;
            }
            Some(&a.solver)
        }
        Command::Trace(a) => {
            positive("ds", a.ds);
            if a.ds.is_some() {
                config.grid.ds = a.ds;
            }
            if !a.points.is_empty() {
                config.trace.points = a.points.clone();
            }
            None
        }
        _ => None,
    };
    if let Some(a) = solver {
        positive("tol-fix", a.tol_fix);
        positive("strip-width", a.strip_width);
        if a.max_iterations == Some(0) {
            errors.push("--max-iterations: must be >= 1".into());
        }
        let s = &mut config.solver;
        s.tol_fix = a.tol_fix.unwrap_or(s.tol_fix);
        s.max_iterations = a.max_iterations.unwrap_or(s.max_iterations);
        s.mode = a.mode.unwrap_or(s.mode);
        s.strip_width = a.strip_width.unwrap_or(s.strip_width);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Schema(errors))
    }
}

fn dispatch(command: &Command, config: &RunConfig, out: &Path) -> Result<Outcome> {
    match command {
        Command::Check => check(config),
        Command::Solve(_) => solve(config, out),
        Command::Steady(_) => steady(config, out),
        Command::Relax(_) => relax(config, out),
        Command::Trace(_) => trace(config, out),
        Command::Compare => compare(),
    }
}

fn check(config: &RunConfig) -> Result<Outcome> {
    let prepared = Prepared::new(config)?;
    let failures = check_conditions(&prepared.report);
    for f in &failures {
        eprintln!("check failed: {f}");
    }
    let pass = failures.is_empty();
    Ok(Outcome {
        report: json!({
            "status": if pass { "pass" } else { "fail" },
            "failures": failures,
            "corner_mismatch": prepared.inflow.corner_mismatch(prepared.mass.nodes()),
            "bounds": prepared.report,
        }),
        code: if pass { EXIT_OK } else { EXIT_CHECK_FAILED },
    })
}

/// Nodal invariants of a converged field.
fn invariants(field: &DensityField, m_b: f64, bound: Option<f64>) -> (Value, Vec<String>) {
    let (min, sup, above) = (field.min(), field.sup(), field.sup_above(m_b));
    let mut broken = Vec::new();
    if min < -NODE_TOL {
        broken.push(format!("negative node value {min:e}"));
    }
    if above > NODE_TOL {
        broken.push(format!("nonzero value {above:e} above m_B = {m_b}"));
    }
    if let Some(b) = bound {
        if sup > b * BOUND_SLACK {
            broken.push(format!("sup {sup} exceeds the bound {b} (x{BOUND_SLACK})"));
        }
    }
    let value = json!({
        "min": min,
        "sup": sup,
        "sup_above_m_B": above,
        "bound": bound,
        "within_bound": bound.map(|b| sup <= b * BOUND_SLACK),
    });
    (value, broken)
}

fn log_json(log: &PicardLog) -> Value {
    let mut v = serde_json::to_value(log).unwrap_or(Value::Null);
    v["final_difference"] = json!(log.final_difference());
    v
}

fn finish(mut report: Value, broken: Vec<String>) -> Outcome {
    for b in &broken {
        eprintln!("invariant violated: {b}");
    }
    let ok = broken.is_empty();
    report["status"] = json!(if ok { "ok" } else { "invariant_violated" });
    report["violations"] = json!(broken);
    Outcome {
        report,
        code: if ok { EXIT_OK } else { EXIT_ERROR },
    }
}

fn solve(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let prepared = Prepared::new(config)?;
    let failures = check_conditions(&prepared.report);
    if !failures.is_empty() {
        warn!("smallness conditions fail; the sup bound is not asserted");
    }
    let problem = Problem {
        kernels: &config.kernels,
        fields: &prepared.fields,
        geometry: &config.geometry,
        inflow: Inflow::Transient(&prepared.inflow),
    };
    let (field, log) = picard_solve(&problem, prepared.grid.clone(), &config.solver)?;
    info!("converged after {} iterations", log.iterations);
    let bound =
        (prepared.report.flags.contraction && prepared.report.flags.data_size).then_some(prepared.report.sup_bound);
    let (inv, broken) = invariants(&field, prepared.mass.m_b(), bound);
    if config.output.field_csv {
        write_field_csv(&out.join("field.csv"), &field, true)?;
    }
    Ok(finish(
        json!({ "picard": log_json(&log), "field": inv, "check_failures": failures, "bounds": prepared.report }),
        broken,
    ))
}

fn steady(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let prepared = Prepared::new(config)?;
    let (field, log) = stationary_solve(
        &prepared.inflow_star,
        &prepared.fields_star,
        &config.kernels,
        &config.geometry,
        prepared.stationary_grid(),
        &config.solver,
    )?;
    let flags = prepared.report.flags;
    let bound = (flags.contraction_star && flags.data_size_star).then_some(prepared.report.sup_bound_star);
    let (inv, broken) = invariants(&field, prepared.mass.m_b(), bound);
    if config.output.field_csv {
        write_field_csv(&out.join("steady_field.csv"), &field, false)?;
    }
    Ok(finish(
        json!({ "picard": log_json(&log), "field": inv, "bounds": prepared.report }),
        broken,
    ))
}

fn relax(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let study = relaxation_study(config)?;
    let mut w = csv::Writer::from_path(out.join("relax.csv"))?;
    w.write_record(["t", "distance"])?;
    for p in &study.points {
        w.serialize((p.t, p.distance))?;
    }
    w.flush()?;
    if !study.relaxed {
        eprintln!(
            "not relaxed: final distance {:e} (tolerance {:e}), monotone tail {}",
            study.final_distance, study.tolerance, study.monotone_tail
        );
    }
    Ok(Outcome {
        report: json!({
            "status": if study.relaxed { "relaxed" } else { "not_relaxed" },
            "verdict": study.relaxed,
            "study": study,
        }),
        code: if study.relaxed { EXIT_OK } else { EXIT_CHECK_FAILED },
    })
}

fn trace(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let fields = config.field_set();
    let prepared = Prepared::new(config)?;
    let h_gl = prepared.report.norms.h_gl;
    let a0 = config.fields.a0;
    let tracer = Tracer::new(&fields, &config.kernels, config.geometry)
        .with_step(config.ds())
        .with_clock(Clock::Running);
    let periodic = !config.geometry.is_columnar();
    let mut w = csv::Writer::from_path(out.join("trace.csv"))?;
    let mut header = vec!["path", "direction", "s", "t", "x3", "m"];
    if periodic {
        header.extend(["x1", "x2"]);
    }
    w.write_record(&header)?;
    let mut summary = Vec::new();
    let mut broken = Vec::new();
    for (k, &[t, x3, m]) in config.trace.points.iter().enumerate() {
        let start = State::new(t, x3, m);
        let (back, entry) = tracer.backward_path(start)?;
        let forward = tracer.trace_forward(start, None)?;
        let rows = back
            .iter()
            .map(|p| ("backward", p))
            .chain(forward.points.iter().map(|p| ("forward", p)));
        for (dir, p) in rows {
            let st = &p.state;
            if periodic {
                w.serialize((k, dir, p.s, st.t, st.x[2], st.m, st.x[0], st.x[1]))?;
            } else {
                w.serialize((k, dir, p.s, st.t, st.x[2], st.m))?;
            }
        }
        let crossing = forward.crossing_bound_holds(a0, 1e-8);
        let mass = forward.mass_bound_holds(h_gl, 1e-8);
        if !crossing {
            broken.push(format!("path {k}: exit length exceeds x3/A0"));
        }
        if !mass {
            broken.push(format!("path {k}: mass growth bound violated"));
        }
        summary.push(json!({
            "start": [t, x3, m],
            "entry": entry.kind,
            "tau_minus": entry.state.t,
            "entry_state": entry.state,
            "s_entry": entry.s,
            "s_bar_1": forward.exit_s,
            "crossing_bound_holds": crossing,
            "mass_bound_holds": mass,
        }));
    }
    w.flush()?;
    Ok(finish(json!({ "paths": summary, "h_gl_sup": h_gl }), broken))
}

fn compare() -> Result<Outcome> {
    let rows = oracle::compare_suite()?;
    Ok(Outcome {
        report: json!({ "status": "ok", "table": rows }),
        code: EXIT_OK,
    })
}

/// Nodal CSV: `t,x3,m,sigma` (`t,x1,x2,x3,m,sigma` in a periodic box); the
/// stationary field drops `t`.
pub fn write_field_csv(path: &Path, field: &DensityField, with_time: bool) -> Result<()> {
    let g = &field.grid;
    let periodic = g.x1.len > 1 || g.x2.len > 1 || g.x1.periodic;
    let mut header = Vec::new();
    if with_time {
        header.push("t");
    }
    if periodic {
        header.extend(["x1", "x2"]);
    }
    header.extend(["x3", "m", "sigma"]);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    let masses = g.mass.nodes();
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for c in 0..g.columns() {
        let (t, x) = g.column_point(c);
        for (m, v) in masses.iter().zip(field.column(c)) {
            rec.clear();
            if with_time {
                rec.push(t.to_string());
            }
            if periodic {
                rec.push(x[0].to_string());
                rec.push(x[1].to_string());
            }
            rec.push(x[2].to_string());
            rec.push(m.to_string());
            rec.push(v.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
