//! Run configuration: JSON schema, defaults, validation and assembly of the
//! numerical problem.

use crate::bounds::{self, BoundReport, DataNorms, Lattice};
use crate::characteristics::default_step;
use crate::collision::MassGrid;
use crate::error::{Error, Result};
use crate::model::{validate_mass_function, FieldSet, Geometry, KernelSet, SupersaturationField, VelocityField};
use crate::solver::{Axis, Grid, InflowData, InflowProfile, SolverOptions};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_x3_nodes")]
    pub x3_nodes: usize,
    /// Nodes on `[0, m_B]`.
    #[serde(default = "default_mass_nodes")]
    pub mass_nodes: usize,
    /// Horizontal nodes per axis (periodic geometry only).
    #[serde(default = "default_horizontal_nodes")]
    pub horizontal_nodes: [usize; 2],
    /// Final time; defaults to `2 / A0`.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Time step; defaults to the `x3` spacing divided by `A0`.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Characteristic step; defaults to `min(1e-2, 1 / (20 A0))`.
    #[serde(default)]
    pub ds: Option<f64>,
    /// Mass grid continues past `m_B` up to `mass_extent * m_B`.
    #[serde(default = "default_extent")]
    pub mass_extent: f64,
    /// Sampling lattice points per axis for field suprema.
    #[serde(default = "default_lattice")]
    pub lattice_points: usize,
}

fn default_x3_nodes() -> usize {
    65
}
fn default_mass_nodes() -> usize {
    129
}
fn default_horizontal_nodes() -> [usize; 2] {
    [8, 8]
}
fn default_extent() -> f64 {
    1.0
}
fn default_lattice() -> usize {
    64
}

impl Default for GridConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsConfig {
    pub a0: f64,
    pub u: VelocityField,
    pub q: SupersaturationField,
    /// Stationary velocity; defaults to the `t -> infinity` limit of `u`.
    #[serde(default)]
    pub u_star: Option<VelocityField>,
    #[serde(default)]
    pub q_star: Option<SupersaturationField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sigma0: InflowProfile,
    pub sigma1: InflowProfile,
    /// Stationary top data; defaults to the `t -> infinity` limit of `sigma1`.
    #[serde(default)]
    pub sigma1_star: Option<InflowProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxConfig {
    /// Probe times in units of `1 / A0`.
    #[serde(default = "default_probes")]
    pub probe_times: Vec<f64>,
    /// Final distance that counts as relaxed.
    #[serde(default = "default_relax_tol")]
    pub tolerance: f64,
    /// Horizon of the transient run in units of `1 / A0`; at least the last probe.
    #[serde(default = "default_relax_horizon")]
    pub horizon: f64,
}

fn default_probes() -> Vec<f64> {
    vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
}
fn default_relax_tol() -> f64 {
    1e-2
}
fn default_relax_horizon() -> f64 {
    4.0
}

impl Default for RelaxConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    /// `(t, x3, m)` starting triples for backward traces.
    #[serde(default)]
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory (overridden by `--output`).
    #[serde(default = "default_out_dir")]
    pub dir: String,
    /// Write the nodal field CSV.
    #[serde(default = "yes")]
    pub field_csv: bool,
}

fn default_out_dir() -> String {
    "out".into()
}
fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults")
    }
}

/// Fully resolved configuration (defaults included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub geometry: Geometry,
    pub grid: GridConfig,
    pub kernels: KernelSet,
    pub fields: FieldsConfig,
    pub data: DataConfig,
    pub solver: SolverOptions,
    pub relax: RelaxConfig,
    pub trace: TraceConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverBlock {
    #[serde(default = "default_tol")]
    tol_fix: f64,
    #[serde(default = "default_max_iter")]
    max_iterations: usize,
    #[serde(default)]
    mode: crate::solver::Mode,
    #[serde(default = "default_strip")]
    strip_width: f64,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    50
}
fn default_strip() -> f64 {
    0.25
}

const BLOCKS: [&str; 9] = [
    "geometry", "grid", "kernels", "fields", "data", "solver", "relax", "trace", "output",
];

fn block<T: DeserializeOwned>(
    root: &serde_json::Map<String, Value>,
    name: &str,
    errors: &mut Vec<String>,
) -> Option<T> {
    let v = root.get(name).cloned().unwrap_or(Value::Object(Default::default()));
    match serde_json::from_value(v) {
        Ok(x) => Some(x),
        Err(e) => {
            errors.push(format!("{name}: {e}"));
            None
        }
    }
}

/// Parses and validates a configuration document, reporting every violation.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let Value::Object(root) = root else {
        return Err(Error::Parse("top level must be a JSON object".into()));
    };
    let mut errors = Vec::new();
    for key in root.keys() {
        if !BLOCKS.contains(&key.as_str()) {
            errors.push(format!("{key}: unknown block"));
        }
    }
    for required in ["kernels", "fields", "data"] {
        if !root.contains_key(required) {
            errors.push(format!("{required}: required"));
        }
    }
    let geometry: Option<Geometry> = if root.contains_key("geometry") {
        block(&root, "geometry", &mut errors)
    } else {
        Some(Geometry::Columnar)
    };
    let grid: Option<GridConfig> = block(&root, "grid", &mut errors);
    let kernels: Option<KernelSet> = if root.contains_key("kernels") {
        block(&root, "kernels", &mut errors)
    } else {
        None
    };
    let fields: Option<FieldsConfig> = if root.contains_key("fields") {
        block(&root, "fields", &mut errors)
    } else {
        None
    };
    let data: Option<DataConfig> = if root.contains_key("data") {
        block(&root, "data", &mut errors)
    } else {
        None
    };
    let solver: Option<SolverBlock> = block(&root, "solver", &mut errors);
    let relax: Option<RelaxConfig> = block(&root, "relax", &mut errors);
    let trace: Option<TraceConfig> = block(&root, "trace", &mut errors);
    let output: Option<OutputConfig> = block(&root, "output", &mut errors);

    let (
        Some(geometry),
        Some(grid),
        Some(kernels),
        Some(fields),
        Some(data),
        Some(solver),
        Some(relax),
        Some(trace),
        Some(output),
    ) = (geometry, grid, kernels, fields, data, solver, relax, trace, output)
    else {
        return Err(Error::Schema(errors));
    };
    let config = RunConfig {
        geometry,
        grid,
        kernels,
        fields,
        data,
        solver: SolverOptions {
            tol_fix: solver.tol_fix,
            max_iterations: solver.max_iterations,
            mode: solver.mode,
            strip_width: solver.strip_width,
        },
        relax,
        trace,
        output,
    };
    config.validate(&mut errors);
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(Error::Schema(errors))
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_config(&text)
}

fn positive(name: &str, v: f64, errors: &mut Vec<String>) {
    if !(v > 0.0 && v.is_finite()) {
        errors.push(format!("{name}: must be finite and > 0"));
    }
}

impl RunConfig {
    pub fn horizon(&self) -> f64 {
        self.grid.horizon.unwrap_or(2.0 / self.fields.a0)
    }

    pub fn dt(&self) -> f64 {
        self.grid
            .dt
            .unwrap_or(1.0 / ((self.grid.x3_nodes.max(2) - 1) as f64 * self.fields.a0))
    }

    pub fn ds(&self) -> f64 {
        self.grid.ds.unwrap_or_else(|| default_step(self.fields.a0))
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::new(self.grid.lattice_points, self.horizon())
    }

    pub fn field_set(&self) -> FieldSet {
        FieldSet::new(
            self.fields.a0,
            self.fields.u.clone(),
            self.fields.q.clone(),
            &self.geometry,
        )
    }

    pub fn stationary_field_set(&self) -> FieldSet {
        let limit = self.field_set().stationary_limit();
        FieldSet::new(
            self.fields.a0,
            self.fields.u_star.clone().unwrap_or(limit.u),
            self.fields.q_star.clone().unwrap_or(limit.q),
            &self.geometry,
        )
    }

    pub fn inflow(&self) -> InflowData {
        InflowData {
            sigma0: self.data.sigma0.clone(),
            sigma1: self.data.sigma1.clone(),
        }
    }

    /// Stationary top data (explicit or the limit of `sigma1`).
    pub fn stationary_inflow(&self) -> InflowProfile {
        self.data
            .sigma1_star
            .clone()
            .unwrap_or_else(|| self.data.sigma1.clone())
    }

    /// Replaces every unset default with its resolved value, so the report
    /// shows what was actually run.
    pub fn resolved(&self) -> RunConfig {
        let mut out = self.clone();
        out.grid.horizon = Some(self.horizon());
        out.grid.dt = Some(self.dt());
        out.grid.ds = Some(self.ds());
        let star = self.stationary_field_set();
        out.fields.u_star = Some(star.u);
        out.fields.q_star = Some(star.q);
        out.data.sigma1_star = Some(self.stationary_inflow());
        out
    }

    fn validate(&self, errors: &mut Vec<String>) {
        positive("fields.a0", self.fields.a0, errors);
        positive("solver.tol_fix", self.solver.tol_fix, errors);
        positive("solver.strip_width", self.solver.strip_width, errors);
        if self.solver.max_iterations == 0 {
            errors.push("solver.max_iterations: must be >= 1".into());
        }
        if self.grid.x3_nodes < 3 {
            errors.push("grid.x3_nodes: must be >= 3".into());
        }
        if self.grid.mass_nodes < 2 {
            errors.push("grid.mass_nodes: must be >= 2".into());
        }
        if self.grid.horizontal_nodes.contains(&0) {
            errors.push("grid.horizontal_nodes: must be >= 1".into());
        }
        if self.grid.lattice_points < 2 {
            errors.push("grid.lattice_points: must be >= 2".into());
        }
        for (name, v) in [
            ("grid.horizon", self.grid.horizon),
            ("grid.dt", self.grid.dt),
            ("grid.ds", self.grid.ds),
        ] {
            if let Some(v) = v {
                positive(name, v, errors);
            }
        }
        if !(self.grid.mass_extent >= 1.0 && self.grid.mass_extent.is_finite()) {
            errors.push("grid.mass_extent: must be finite and >= 1".into());
        }
        positive("relax.tolerance", self.relax.tolerance, errors);
        positive("relax.horizon", self.relax.horizon, errors);
        if let Geometry::PeriodicBox { lengths } = self.geometry {
            if lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                errors.push("geometry.lengths: must be finite and > 0".into());
            }
        }
        let before = errors.len();
        self.kernels.validate(errors);
        if errors.len() > before || !(self.fields.a0 > 0.0 && self.fields.a0.is_finite()) {
            return;
        }
        self.validate_fields(errors);
        self.validate_data(errors);
    }

    fn validate_fields(&self, errors: &mut Vec<String>) {
        if self.geometry.is_columnar() {
            let mut columnar = |name: &str, bad: bool| {
                if bad {
                    errors.push(format!("{name}: depends on (x1, x2), which columnar geometry forbids"));
                }
            };
            for (name, u) in [
                ("fields.u", Some(&self.fields.u)),
                ("fields.u_star", self.fields.u_star.as_ref()),
            ] {
                if let Some(VelocityField::Falling { swirl, .. }) = u {
                    columnar(name, *swirl != 0.0);
                }
            }
            for (name, q) in [
                ("fields.q", Some(&self.fields.q)),
                ("fields.q_star", self.fields.q_star.as_ref()),
            ] {
                if let Some(SupersaturationField::Profile { wave, .. }) = q {
                    columnar(name, *wave != 0.0);
                }
            }
        }
        let star = self.stationary_field_set();
        if !star.is_time_independent() {
            errors.push("fields.u_star/q_star: stationary fields must not depend on time".into());
        }
        let lattice = self.lattice();
        let fields = self.field_set();
        let m_b = match bounds::h_gl_sup(&self.kernels, &fields, &self.geometry, &lattice) {
            Ok(h) => bounds::compute_m_b(&self.kernels, &fields, h),
            Err(e) => {
                errors.push(format!("fields.q: {e}"));
                return;
            }
        };
        let m_max = m_b * self.grid.mass_extent;
        for (name, f) in [("fields.u", &fields), ("fields.u_star", &star)] {
            if let Some((t, x, m, u3)) = bounds::fall_speed_violation(f, &self.geometry, &lattice, m_max) {
                errors.push(format!(
                    "{name}: u3 = {u3} > -A0 = {} at t={t}, x={x:?}, m={m}",
                    -self.fields.a0
                ));
            }
        }
    }

    fn validate_data(&self, errors: &mut Vec<String>) {
        let (lo, hi) = (self.kernels.m_lower, self.kernels.m_upper);
        let horizon = self.horizon();
        let star = self.stationary_inflow();
        let profiles = [
            ("data.sigma0", &self.data.sigma0, 1.0),
            ("data.sigma1", &self.data.sigma1, horizon),
            ("data.sigma1_star", &star, 0.0),
        ];
        for (name, p, z_max) in profiles {
            validate_mass_function(&format!("{name}.mass"), &p.mass, errors);
            match p.mass.support() {
                Some((a, b)) if p.mass.sup_abs() == 0.0 || (a >= lo - 1e-12 && b <= hi + 1e-12) => {}
                _ => errors.push(format!("{name}.mass: must vanish outside [m_a, m_A] = [{lo}, {hi}]")),
            }
            let n = self.grid.lattice_points.max(2);
            let min_mod = (0..n)
                .map(|i| p.modulation.value(z_max * i as f64 / (n - 1) as f64))
                .fold(f64::INFINITY, f64::min);
            if !(min_mod >= 0.0) {
                errors.push(format!(
                    "{name}.modulation: must be finite and >= 0 (sampled minimum {min_mod})"
                ));
            }
        }
        if self.data.sigma1_star.is_none() && self.data.sigma1.modulation.limit().is_none() {
            errors.push("data.sigma1_star: required because data.sigma1 has no limit as t grows".into());
        }
        if let Some(s) = &self.data.sigma1_star {
            if s.modulation.limit().is_none() {
                errors.push("data.sigma1_star.modulation: must be time-independent".into());
            }
        }
    }

    /// Sup of the data over the transient inflow boundary and of the
    /// stationary top data.
    pub fn data_norms(&self) -> DataNorms {
        let n = self.grid.lattice_points;
        let transient = self
            .data
            .sigma0
            .sup_abs(1.0, n)
            .max(self.data.sigma1.sup_abs(self.horizon(), n));
        let star = self.stationary_inflow();
        DataNorms {
            transient,
            stationary: star.mass.sup_abs() * star.modulation.limit().unwrap_or(f64::NAN).abs(),
        }
    }
}

/// Numerical problem assembled from a configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub fields: FieldSet,
    pub fields_star: FieldSet,
    pub inflow: InflowData,
    pub inflow_star: InflowProfile,
    pub report: BoundReport,
    pub mass: MassGrid,
    /// Transient grid on `[0, horizon]`.
    pub grid: Grid,
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Self::with_horizon(config, config.horizon())
    }

    /// Same problem with the time axis extended to `horizon`.
    pub fn with_horizon(config: &RunConfig, horizon: f64) -> Result<Self> {
        let fields = config.field_set();
        let fields_star = config.stationary_field_set();
        let lattice = Lattice::new(config.grid.lattice_points, horizon.max(config.horizon()));
        let h = bounds::h_gl_sup(&config.kernels, &fields, &config.geometry, &lattice)?;
        let h_star = bounds::h_gl_sup(&config.kernels, &fields_star, &config.geometry, &lattice)?;
        let m_b = bounds::compute_m_b(&config.kernels, &fields, h).max(bounds::compute_m_b(
            &config.kernels,
            &fields_star,
            h_star,
        ));
        let mass = MassGrid::new(
            config.kernels.m_lower,
            config.kernels.m_upper,
            m_b,
            config.grid.mass_nodes,
            config.grid.mass_extent,
        );
        let report = bounds::compute_constants(
            &config.kernels,
            &fields,
            &fields_star,
            &config.geometry,
            config.data_norms(),
            &lattice,
            &mass,
        )?;
        let grid = build_grid(config, &mass, horizon);
        Ok(Self {
            config: config.clone(),
            fields,
            fields_star,
            inflow: config.inflow(),
            inflow_star: config.stationary_inflow(),
            report,
            mass,
            grid,
        })
    }

    /// Grid without a time axis for the stationary problem.
    pub fn stationary_grid(&self) -> Grid {
        Grid {
            time: Axis::single(0.0),
            ..self.grid.clone()
        }
    }
}

/// Time nodes `0, dt, ...` with `dt` shrunk so the last node lands on `horizon`.
pub fn time_axis(horizon: f64, dt: f64) -> Axis {
    let steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    Axis::closed(0.0, steps as f64 * (horizon / steps as f64), steps + 1)
}

fn build_grid(config: &RunConfig, mass: &MassGrid, horizon: f64) -> Grid {
    let (x1, x2) = match config.geometry {
        Geometry::Columnar => (Axis::single(0.0), Axis::single(0.0)),
        Geometry::PeriodicBox { lengths } => (
            Axis::periodic(lengths[0], config.grid.horizontal_nodes[0]),
            Axis::periodic(lengths[1], config.grid.horizontal_nodes[1]),
        ),
    };
    Grid {
        time: time_axis(horizon, config.dt()),
        x1,
        x2,
        x3: Axis::closed(0.0, 1.0, config.grid.x3_nodes),
        mass: mass.clone(),
        ds: config.ds(),
    }
}

/// The default desk scenario as a JSON document.
pub fn desk_scenario() -> Value {
    serde_json::json!({
        "geometry": { "mode": "columnar" },
        "grid": { "x3_nodes": 65, "mass_nodes": 129 },
        "kernels": {
            "m_a": 1.0,
            "m_A": 2.0,
            "beta": { "kind": "truncated_constant", "b": 0.1 },
            "g0": { "kind": "hat", "lo": 1.0, "peak": 1.5, "hi": 2.0, "height": 1.0 },
            "g1": { "kind": "zero" },
            "eta": { "kind": "hat", "lo": 1.0, "peak": 1.5, "hi": 2.0, "height": 0.1 },
            "n": { "kind": "hat", "lo": 1.0, "peak": 1.5, "hi": 2.0, "height": 1.0 },
            "n1": 1.0
        },
        "fields": {
            "a0": 1.0,
            "u": { "kind": "falling", "base": 1.0, "mass_coeff": 1.0, "mass_scale": 1.0 },
            "q": { "kind": "profile", "bottom": 0.1, "top": 0.2 }
        },
        "data": {
            "sigma0": {
                "mass": { "kind": "hat", "lo": 1.0, "peak": 1.5, "hi": 2.0, "height": 0.05 }
            },
            "sigma1": {
                "mass": { "kind": "hat", "lo": 1.0, "peak": 1.5, "hi": 2.0, "height": 0.05 }
            }
        },
        "solver": { "tol_fix": 1e-10, "max_iterations": 50, "mode": "global", "strip_width": 0.25 }
    })
}

pub fn desk_config() -> RunConfig {
    parse_config(&desk_scenario().to_string()).expect("the desk scenario is valid")
}
