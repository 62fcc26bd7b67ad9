//! Stationary problem and the relaxation study `sigma(t, .) -> sigma_inf`.

use crate::bounds::Lattice;
use crate::config::{Prepared, RunConfig};
use crate::error::{Error, Result};
use crate::model::{FieldSet, Geometry, KernelSet, MassFunction};
use crate::solver::{
    lambda_at, picard_solve, DensityField, Grid, Inflow, InflowProfile, PicardLog, Problem, SolverOptions,
};
use serde::Serialize;

/// `sigma_inf` on a grid whose time axis is a single node.
pub type StationaryField = DensityField;

/// Picard iteration for the stationary equation: paths run from the top
/// plane with a frozen clock.
pub fn stationary_solve(
    inflow_top: &InflowProfile,
    fields: &FieldSet,
    kernels: &KernelSet,
    geometry: &Geometry,
    grid: Grid,
    opts: &SolverOptions,
) -> Result<(StationaryField, PicardLog)> {
    if grid.time.len != 1 {
        return Err(Error::ResourceGuard(
            "stationary grid must have a single time node".into(),
        ));
    }
    if !fields.is_time_independent() {
        return Err(Error::Schema(vec![
            "fields.u_star/q_star: stationary fields must not depend on time".into(),
        ]));
    }
    let problem = Problem {
        kernels,
        fields,
        geometry,
        inflow: Inflow::Stationary(inflow_top),
    };
    picard_solve(&problem, grid, opts)
}

/// Largest gap between the nodal interpolant of `field` and `Lambda(field)`
/// evaluated directly at cell and edge midpoints. At a fixed point this is the
/// interpolation error of the discrete solution.
pub fn interpolation_error(problem: &Problem, field: &DensityField) -> Result<f64> {
    let g = &field.grid;
    let masses = g.mass.nodes();
    let top = g.mass.upper_index().min(masses.len() - 1);
    let mut points = Vec::new();
    for c in 0..g.columns() {
        let (it, _, _, i3) = g.column_coords(c);
        if i3 + 1 >= g.x3.len || it > 0 {
            continue;
        }
        let (t, x) = g.column_point(c);
        let x_mid = [x[0], x[1], 0.5 * (g.x3.node(i3) + g.x3.node(i3 + 1))];
        for im in 0..top {
            let m_mid = 0.5 * (masses[im] + masses[im + 1]);
            points.push((t, x_mid, masses[im]));
            points.push((t, x, m_mid));
            points.push((t, x_mid, m_mid));
        }
    }
    let direct = lambda_at(problem, field, &points)?;
    let mut worst = 0.0f64;
    for ((t, x, m), d) in points.iter().zip(direct) {
        worst = worst.max((field.evaluate(*t, x, *m)? - d).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelaxPoint {
    /// Probe time (physical units).
    pub t: f64,
    /// Time node actually compared.
    pub t_node: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxReport {
    pub points: Vec<RelaxPoint>,
    pub final_distance: f64,
    pub tolerance: f64,
    /// Distances are nonincreasing (up to `10 tol_fix`) for probes after `1/A0`.
    pub monotone_tail: bool,
    pub relaxed: bool,
    /// Largest sampled `|u(T) - u*|` or `|Q(T) - Q*|` at the horizon `T`.
    pub field_gap: f64,
    /// Measured interpolation error of `sigma_inf`.
    pub interpolation_error: f64,
    pub transient_log: PicardLog,
    pub stationary_log: PicardLog,
    pub stationary_sup: f64,
}

/// Checks that `eta` and `g1` vanish outside `[m_a, m_B]`, which the
/// relaxation theorem needs and the transient one does not.
pub fn validate_relax_support(kernels: &KernelSet, m_b: f64) -> Result<()> {
    let mut errors = Vec::new();
    let mut check = |name: &str, f: &MassFunction| {
        if f.sup_abs() == 0.0 {
            return;
        }
        match f.support() {
            Some((a, b)) if a >= kernels.m_lower - 1e-12 && b <= m_b + 1e-12 => {}
            _ => errors.push(format!(
                "kernels.{name}: must vanish outside [m_a, m_B] = [{}, {m_b}] for relax",
                kernels.m_lower
            )),
        }
    };
    check("eta", &kernels.eta);
    check("g1", &kernels.g1);
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Schema(errors))
    }
}

fn field_gap(prepared: &Prepared, horizon: f64) -> f64 {
    let lattice = Lattice::new(prepared.config.grid.lattice_points, horizon);
    let (f, s) = (&prepared.fields, &prepared.fields_star);
    let m_max = prepared.mass.top();
    let mut gap = 0.0f64;
    for (_, x) in lattice.space_time(f, &prepared.config.geometry) {
        gap = gap.max((f.q(horizon, &x) - s.q(0.0, &x)).abs());
        for m in lattice.masses(m_max) {
            let (a, b) = (f.velocity(horizon, &x, m), s.velocity(0.0, &x, m));
            gap = gap.max((0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max));
        }
    }
    gap
}

/// Transient solve to the relax horizon, stationary solve on the same
/// `x3` and mass grid, and the max-node distance at each probe time.
pub fn relaxation_study(config: &RunConfig) -> Result<RelaxReport> {
    let a0 = config.fields.a0;
    let last_probe = config.relax.probe_times.iter().copied().fold(0.0, f64::max);
    let horizon = config.relax.horizon.max(last_probe) / a0;
    let prepared = Prepared::with_horizon(config, horizon)?;
    validate_relax_support(&config.kernels, prepared.mass.m_b())?;

    let transient = Problem {
        kernels: &config.kernels,
        fields: &prepared.fields,
        geometry: &config.geometry,
        inflow: Inflow::Transient(&prepared.inflow),
    };
    let (sigma, transient_log) = picard_solve(&transient, prepared.grid.clone(), &config.solver)?;
    let (sigma_inf, stationary_log) = stationary_solve(
        &prepared.inflow_star,
        &prepared.fields_star,
        &config.kernels,
        &config.geometry,
        prepared.stationary_grid(),
        &config.solver,
    )?;
    let stationary = Problem {
        kernels: &config.kernels,
        fields: &prepared.fields_star,
        geometry: &config.geometry,
        inflow: Inflow::Stationary(&prepared.inflow_star),
    };
    let interpolation_error = interpolation_error(&stationary, &sigma_inf)?;

    let g = &sigma.grid;
    let slice = sigma_inf.values.len();
    let mut points = Vec::new();
    for &p in &config.relax.probe_times {
        let t = p / a0;
        let it = ((t - g.time.start) / g.time.step)
            .round()
            .clamp(0.0, (g.time.len - 1) as f64) as usize;
        let values = &sigma.values[it * slice..(it + 1) * slice];
        let distance = values
            .iter()
            .zip(&sigma_inf.values)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        points.push(RelaxPoint {
            t,
            t_node: g.time.node(it),
            distance,
        });
    }
    let slack = 10.0 * config.solver.tol_fix;
    let tail: Vec<f64> = points
        .iter()
        .filter(|p| p.t_node > 1.0 / a0)
        .map(|p| p.distance)
        .collect();
    let monotone_tail = tail.windows(2).all(|w| w[1] <= w[0] + slack);
    let final_distance = points.last().map_or(0.0, |p| p.distance);
    Ok(RelaxReport {
        final_distance,
        tolerance: config.relax.tolerance,
        monotone_tail,
        relaxed: monotone_tail && final_distance <= config.relax.tolerance,
        field_gap: field_gap(&prepared, horizon),
        interpolation_error,
        transient_log,
        stationary_log,
        stationary_sup: sigma_inf.sup(),
        points,
    })
}
