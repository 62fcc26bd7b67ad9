//! Independent references: closed-form solutions, brute-force quadrature and
//! refined re-runs, used by the test suite and the `compare` subcommand.
//!
//! Nothing here is tuned for speed and the closed forms do not call into the
//! tracer or the collision tables.

use crate::collision::{CollisionTables, MassGrid};
use crate::config::{parse_config, Prepared, RunConfig};
use crate::error::{Error, Result};
use crate::model::KernelSet;
use crate::solver::{picard_solve, with_threads, DensityField, Inflow, InflowData, Problem};
use serde::Serialize;
use serde_json::json;

/// Node budget for [`dense_reference`].
pub const DENSE_NODE_CAP: usize = 8_000_000;

/// Straight backward line from `(t, x3)` with constant `u` (`u3 < 0`): the
/// foot is on the top plane when it gets there no later than `t = 0`.
fn straight_foot(u3: f64, t: f64, x3: f64) -> (bool, f64, f64) {
    let to_top = (1.0 - x3) / -u3;
    if to_top <= t {
        (true, t - to_top, to_top)
    } else {
        (false, x3 - u3 * t, t)
    }
}

/// Pure transport: the inflow value at the straight-line foot.
pub fn advection_exact(inflow: &InflowData, u: [f64; 3], t: f64, x3: f64, m: f64) -> f64 {
    if !(u[2] < 0.0) {
        return f64::NAN;
    }
    match straight_foot(u[2], t, x3) {
        (true, tau, _) => inflow.sigma1.value(tau, m),
        (false, z, _) => inflow.sigma0.value(z, m),
    }
}

/// Pure decay at rate `gamma`: foot value times `exp(-gamma s)`.
pub fn decay_exact(inflow: &InflowData, gamma: f64, u: [f64; 3], t: f64, x3: f64, m: f64) -> f64 {
    if !(u[2] < 0.0) {
        return f64::NAN;
    }
    let (_, _, s) = straight_foot(u[2], t, x3);
    advection_exact(inflow, u, t, x3, m) * (-gamma * s).exp()
}

/// Gain for the truncated-constant kernel and `sigma = 1.5 + sin m`, `m < m_A`.
pub fn gain_closed_form_sine(b: f64, m_upper: f64, m: f64) -> f64 {
    if m >= m_upper {
        return 0.0;
    }
    0.5 * m * b * (2.25 * m + 3.0 * (1.0 - m.cos()) + 0.5 * (m.sin() - m * m.cos()))
}

/// Loss factor for the truncated-constant kernel and `sigma = 1.5 + sin m`.
pub fn loss_closed_form_sine(b: f64, m_upper: f64, m: f64) -> f64 {
    if m >= m_upper {
        return 0.0;
    }
    let w = m_upper - m;
    m * b * (1.5 * w + 1.0 - w.cos())
}

/// `int Phi dm` as a double sum over every ordered pair of uniform nodes,
/// binned by the index of the merged mass.
pub fn brute_total_gain(sigma: &[f64], kernels: &KernelSet, grid: &MassGrid) -> f64 {
    let nodes = grid.nodes();
    let h = grid.spacing();
    let w = grid.weights();
    let uniform = nodes
        .iter()
        .enumerate()
        .take_while(|(i, &m)| (m - *i as f64 * h).abs() <= 1e-9 * h.max(1.0))
        .count();
    let mut total = 0.0;
    for k in (0..uniform).rev() {
        for j in (0..uniform - k).rev() {
            let i = j + k;
            let m = nodes[i];
            if i == 0 || m >= kernels.m_upper * (1.0 - 1e-12) {
                continue;
            }
            let end = if j == 0 || k == 0 { 0.5 } else { 1.0 };
            total += w[i] * 0.5 * m * h * end * kernels.beta.raw(nodes[k], nodes[j]) * sigma[j] * sigma[k];
        }
    }
    total
}

/// The configuration refined `r` times in `x3`, mass, `t` and `s`.
pub fn refine_config(config: &RunConfig, r: usize) -> RunConfig {
    let mut out = config.clone();
    let r = r.max(1);
    out.grid.x3_nodes = (config.grid.x3_nodes - 1) * r + 1;
    out.grid.mass_nodes = (config.grid.mass_nodes - 1) * r + 1;
    out.grid.horizontal_nodes = config.grid.horizontal_nodes.map(|n| n * r);
    out.grid.horizon = Some(config.horizon());
    out.grid.dt = Some(config.dt() / r as f64);
    out.grid.ds = Some(config.ds() / r as f64);
    out
}

/// Transient solve of `config` at `r`-fold resolution on one thread. `r = 1`
/// reproduces the main solve.
pub fn dense_reference(config: &RunConfig, r: usize, node_cap: usize) -> Result<DensityField> {
    let refined = refine_config(config, r);
    let prepared = Prepared::new(&refined)?;
    let nodes = prepared.grid.len();
    if nodes > node_cap {
        return Err(Error::ResourceGuard(format!(
            "dense reference at r={r} needs {nodes} nodes (cap {node_cap})"
        )));
    }
    let problem = Problem {
        kernels: &refined.kernels,
        fields: &prepared.fields,
        geometry: &refined.geometry,
        inflow: Inflow::Transient(&prepared.inflow),
    };
    with_threads(Some(1), || {
        picard_solve(&problem, prepared.grid.clone(), &refined.solver)
    })?
    .map(|(f, _)| f)
}

/// One line of the `compare` table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub scenario: String,
    pub refinements: Vec<usize>,
    /// Max error at each refinement.
    pub errors: Vec<f64>,
    /// `log2(e_r / e_2r)` between consecutive refinements.
    pub orders: Vec<f64>,
    pub max_error: f64,
    /// Smallest measured order (`null` when no order applies).
    pub order: Option<f64>,
}

impl StudyRow {
    fn new(scenario: &str, refinements: &[usize], errors: Vec<f64>) -> Self {
        let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        Self {
            scenario: scenario.into(),
            refinements: refinements.to_vec(),
            max_error: errors.iter().copied().fold(0.0, f64::max),
            order: orders.iter().copied().reduce(f64::min),
            errors,
            orders,
        }
    }
}

fn transport_kernels() -> serde_json::Value {
    json!({ "m_a": 1.0, "m_A": 2.0, "beta": { "kind": "truncated_constant", "b": 0.0 } })
}

fn base_grid() -> serde_json::Value {
    json!({ "x3_nodes": 17, "mass_nodes": 33, "horizon": 1.0, "dt": 1.0 / 16.0, "ds": 0.01 })
}

/// Vertical transport at unit speed of `hat(m) (1 + sin(2 pi (x3 + t)) / 2)`.
pub fn advection_scenario() -> RunConfig {
    let wave = json!({ "kind": "sine", "base": 1.0, "amplitude": 0.5, "frequency": 1.0 });
    let mass = json!({ "kind": "hat", "lo": 1.0, "peak": 1.5, "hi": 2.0, "height": 1.0 });
    let doc = json!({
        "grid": base_grid(),
        "kernels": transport_kernels(),
        "fields": {
            "a0": 1.0,
            "u": { "kind": "constant", "value": [0.0, 0.0, -1.0] },
            "q": { "kind": "constant", "value": 0.0 }
        },
        "data": {
            "sigma0": { "mass": mass, "modulation": wave },
            "sigma1": { "mass": mass, "modulation": wave },
            "sigma1_star": { "mass": mass }
        }
    });
    parse_config(&doc.to_string()).expect("advection scenario is valid")
}

/// Decay at rate `gamma` (through `g1` and `Q = -1`) with data chosen so the
/// solution `hat(m) exp(-gamma (x3 + 2t))` is smooth across the corner.
pub fn decay_scenario(gamma: f64) -> RunConfig {
    let mass = json!({ "kind": "hat", "lo": 1.0, "peak": 1.5, "hi": 2.0, "height": 1.0 });
    let mut kernels = transport_kernels();
    kernels["g1"] = json!({ "kind": "constant", "value": gamma });
    let doc = json!({
        "grid": base_grid(),
        "kernels": kernels,
        "fields": {
            "a0": 1.0,
            "u": { "kind": "constant", "value": [0.0, 0.0, -1.0] },
            "q": { "kind": "constant", "value": -1.0 }
        },
        "data": {
            "sigma0": { "mass": mass, "modulation": { "kind": "exponential", "base": 0.0, "amplitude": 1.0, "rate": gamma } },
            "sigma1": { "mass": mass, "modulation": { "kind": "exponential", "base": 0.0, "amplitude": (-gamma).exp(), "rate": 2.0 * gamma } }
        }
    });
    parse_config(&doc.to_string()).expect("decay scenario is valid")
}

/// Deterministic off-node probes `(t, x3, m)` from a Halton sequence.
pub fn probe_points(count: usize, horizon: f64, m_range: (f64, f64)) -> Vec<[f64; 3]> {
    let halton = |mut i: usize, base: usize| {
        let (mut f, mut r) = (1.0, 0.0);
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    };
    (1..=count)
        .map(|i| {
            [
                horizon * halton(i, 2),
                halton(i, 3),
                m_range.0 + (m_range.1 - m_range.0) * halton(i, 5),
            ]
        })
        .collect()
}

fn field_error(field: &DensityField, probes: &[[f64; 3]], exact: impl Fn(f64, f64, f64) -> f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for &[t, x3, m] in probes {
        let v = field.evaluate(t, &[0.0, 0.0, x3], m)?;
        worst = worst.max((v - exact(t, x3, m)).abs());
    }
    Ok(worst)
}

fn transport_study(
    name: &str,
    config: &RunConfig,
    refinements: &[usize],
    exact: impl Fn(f64, f64, f64) -> f64,
) -> Result<StudyRow> {
    let probes = probe_points(256, config.horizon(), (0.8, 2.0));
    let mut errors = Vec::new();
    for &r in refinements {
        let field = dense_reference(config, r, DENSE_NODE_CAP)?;
        errors.push(field_error(&field, &probes, &exact)?);
    }
    Ok(StudyRow::new(name, refinements, errors))
}

pub fn advection_study(refinements: &[usize]) -> Result<StudyRow> {
    let config = advection_scenario();
    let inflow = config.inflow();
    transport_study("pure_advection", &config, refinements, |t, x3, m| {
        advection_exact(&inflow, [0.0, 0.0, -1.0], t, x3, m)
    })
}

pub fn decay_study(refinements: &[usize]) -> Result<StudyRow> {
    let gamma = 1.0;
    let config = decay_scenario(gamma);
    let inflow = config.inflow();
    transport_study("pure_decay", &config, refinements, |t, x3, m| {
        decay_exact(&inflow, gamma, [0.0, 0.0, -1.0], t, x3, m)
    })
}

fn sine_kernels(b: f64) -> KernelSet {
    serde_json::from_value(json!({
        "m_a": 1.0, "m_A": 2.0, "beta": { "kind": "truncated_constant", "b": b }
    }))
    .expect("kernel literal")
}

/// Gain and loss quadrature errors against the closed forms, on uniform mass
/// grids with `32 r` intervals.
pub fn quadrature_studies(refinements: &[usize]) -> [StudyRow; 2] {
    let b = 0.1;
    let kernels = sine_kernels(b);
    let mut gain_err = Vec::new();
    let mut loss_err = Vec::new();
    for &r in refinements {
        let grid = MassGrid::new(1.0, 2.0, 2.0, 32 * r + 1, 1.0);
        let sigma: Vec<f64> = grid.nodes().iter().map(|m| 1.5 + m.sin()).collect();
        let tables = CollisionTables::new(&kernels, &grid);
        let mut gain = vec![0.0; grid.len()];
        let mut loss = vec![0.0; grid.len()];
        tables.columns(&sigma, &mut gain, &mut loss);
        let (mut eg, mut el) = (0.0f64, 0.0f64);
        for (i, &m) in grid.nodes().iter().enumerate().take(grid.upper_index()) {
            eg = eg.max((gain[i] - gain_closed_form_sine(b, 2.0, m)).abs());
            el = el.max((loss[i] - loss_closed_form_sine(b, 2.0, m)).abs());
        }
        gain_err.push(eg);
        loss_err.push(el);
    }
    [
        StudyRow::new("coag_gain_closed_form", refinements, gain_err),
        StudyRow::new("coag_loss_closed_form", refinements, loss_err),
    ]
}

/// Relative gap between the integrated operator gain and [`brute_total_gain`]
/// on the desk mass grid.
pub fn total_gain_study() -> StudyRow {
    let kernels = sine_kernels(0.1);
    let grid = MassGrid::new(1.0, 2.0, 2.0, 129, 1.0);
    let sigma: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&m| if (1.0..=2.0).contains(&m) { 1.5 + m.sin() } else { 0.0 })
        .collect();
    let tables = CollisionTables::new(&kernels, &grid);
    let mut gain = vec![0.0; grid.len()];
    let mut loss = vec![0.0; grid.len()];
    tables.columns(&sigma, &mut gain, &mut loss);
    let brute = brute_total_gain(&sigma, &kernels, &grid);
    let rel = (grid.integrate(&gain) - brute).abs() / brute.abs().max(f64::MIN_POSITIVE);
    StudyRow::new("total_gain_brute_force", &[1], vec![rel])
}

/// Every study of the `compare` table.
pub fn compare_suite() -> Result<Vec<StudyRow>> {
    let refinements = [1, 2, 4];
    let [gain, loss] = quadrature_studies(&refinements);
    Ok(vec![
        advection_study(&refinements)?,
        decay_study(&refinements)?,
        gain,
        loss,
        total_gain_study(),
    ])
}
