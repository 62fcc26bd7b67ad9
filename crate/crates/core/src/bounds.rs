//! A-priori constants `I, J, K`, the mass ceiling `m_B`, the smallness
//! conditions and the sup-norm bound on the solution.

use crate::collision::MassGrid;
use crate::error::{Error, Result};
use crate::model::{FieldSet, Geometry, KernelSet};
use serde::Serialize;

/// Below this value of `J` the analytic `J -> 0` limits are used.
pub const EPS_J: f64 = 1e-12;

/// Points sampled when estimating suprema of fields over continuous domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lattice {
    /// Points per axis (time, each space axis, mass).
    pub per_axis: usize,
    /// Time window `[0, horizon]` sampled for transient fields.
    pub horizon: f64,
}

impl Lattice {
    pub fn new(per_axis: usize, horizon: f64) -> Self {
        Self {
            per_axis: per_axis.max(2),
            horizon,
        }
    }

    fn axis(&self, lo: f64, hi: f64) -> impl Iterator<Item = f64> + '_ {
        let n = self.per_axis;
        (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
    }

    fn times(&self, fields: &FieldSet) -> Vec<f64> {
        if fields.is_time_independent() {
            vec![0.0]
        } else {
            self.axis(0.0, self.horizon).collect()
        }
    }

    fn horizontal(&self, geometry: &Geometry) -> Vec<[f64; 2]> {
        match geometry {
            Geometry::Columnar => vec![[0.0, 0.0]],
            Geometry::PeriodicBox { lengths } => {
                let n = self.per_axis;
                let xs: Vec<f64> = (0..n).map(|i| lengths[0] * i as f64 / n as f64).collect();
                let ys: Vec<f64> = (0..n).map(|i| lengths[1] * i as f64 / n as f64).collect();
                xs.iter().flat_map(|&a| ys.iter().map(move |&b| [a, b])).collect()
            }
        }
    }

    /// Every `(t, x)` sample point.
    pub fn space_time(&self, fields: &FieldSet, geometry: &Geometry) -> Vec<(f64, [f64; 3])> {
        let times = self.times(fields);
        let horizontal = self.horizontal(geometry);
        let heights: Vec<f64> = self.axis(0.0, 1.0).collect();
        let mut out = Vec::with_capacity(times.len() * horizontal.len() * heights.len());
        for &t in &times {
            for h in &horizontal {
                for &x3 in &heights {
                    out.push((t, [h[0], h[1], x3]));
                }
            }
        }
        out
    }

    pub fn masses(&self, m_max: f64) -> Vec<f64> {
        self.axis(0.0, m_max).collect()
    }
}

/// Sup norms entering the constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Norms {
    pub sigma_tilde: f64,
    pub q: f64,
    pub div_u: f64,
    pub mass_flux_slope: f64,
    pub g0: f64,
    pub g1: f64,
    pub n_l1: f64,
    pub h_gl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Flags {
    /// `I K (1 - e^{-J}) < J`.
    pub contraction: bool,
    /// Data below the threshold.
    pub data_size: bool,
    /// Starred analogue of `contraction`.
    pub contraction_star: bool,
    /// Starred analogue of `data_size`.
    pub data_size_star: bool,
}

impl Flags {
    pub fn all(&self) -> bool {
        self.contraction && self.data_size && self.contraction_star && self.data_size_star
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "I_star")]
    pub i_star: f64,
    #[serde(rename = "J_star")]
    pub j_star: f64,
    #[serde(rename = "m_B")]
    pub m_b: f64,
    #[serde(rename = "m_B_star")]
    pub m_b_star: f64,
    pub sup_bound: f64,
    pub data_threshold: f64,
    pub sup_bound_star: f64,
    pub data_threshold_star: f64,
    pub flags: Flags,
    pub norms: Norms,
    pub norms_star: Norms,
    pub lattice: LatticeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeReport {
    pub per_axis: usize,
    pub horizon: f64,
    pub space_time_points: usize,
    pub mass_points: usize,
    pub mass_grid_nodes: usize,
}

/// Inputs to [`compute_constants`] besides kernels and fields.
#[derive(Debug, Clone, Copy)]
pub struct DataNorms {
    /// `||sigma~||` over the whole inflow boundary.
    pub transient: f64,
    /// `||sigma~1*||`.
    pub stationary: f64,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteNorm(name.to_string()))
    }
}

/// `sup |Q|` over the lattice.
pub fn q_sup(fields: &FieldSet, geometry: &Geometry, lattice: &Lattice) -> Result<f64> {
    let mut sup = 0.0f64;
    for (t, x) in lattice.space_time(fields, geometry) {
        let q = fields.q(t, &x);
        if !q.is_finite() {
            return Err(Error::NonFiniteNorm(format!("Q at t={t}, x={x:?}")));
        }
        sup = sup.max(q.abs());
    }
    Ok(sup)
}

/// `||h_gl|| = ||eta|| ||Q||`.
pub fn h_gl_sup(kernels: &KernelSet, fields: &FieldSet, geometry: &Geometry, lattice: &Lattice) -> Result<f64> {
    finite("h_gl", kernels.eta.sup_abs() * q_sup(fields, geometry, lattice)?)
}

/// `m_B = m_A exp(||h_gl|| / A0)`.
pub fn compute_m_b(kernels: &KernelSet, fields: &FieldSet, h_gl_sup: f64) -> f64 {
    kernels.m_upper * (h_gl_sup / fields.a0).exp()
}

/// Samples `u3 + A0` and returns the first point where the floor `u3 <= -A0`
/// fails.
pub fn fall_speed_violation(
    fields: &FieldSet,
    geometry: &Geometry,
    lattice: &Lattice,
    m_max: f64,
) -> Option<(f64, [f64; 3], f64, f64)> {
    let masses = lattice.masses(m_max);
    for (t, x) in lattice.space_time(fields, geometry) {
        for &m in &masses {
            let u3 = fields.velocity(t, &x, m)[2];
            if !(u3 <= -fields.a0 * (1.0 - 1e-12)) {
                return Some((t, x, m, u3));
            }
        }
    }
    None
}

fn field_norms(
    kernels: &KernelSet,
    fields: &FieldSet,
    geometry: &Geometry,
    lattice: &Lattice,
    grid: &MassGrid,
    sigma_tilde: f64,
) -> Result<Norms> {
    let q = q_sup(fields, geometry, lattice)?;
    let masses = lattice.masses(grid.m_b());
    let mut div_u = 0.0f64;
    for (t, x) in lattice.space_time(fields, geometry) {
        for &m in masses.iter().chain(grid.nodes()) {
            let d = fields.div_u(t, &x, m);
            if !d.is_finite() {
                return Err(Error::NonFiniteNorm(format!("div u at t={t}, x={x:?}, m={m}")));
            }
            div_u = div_u.max(d.abs());
        }
    }
    let n_vals: Vec<f64> = grid.nodes().iter().map(|&m| kernels.n.value(m)).collect();
    Ok(Norms {
        sigma_tilde: finite("sigma~", sigma_tilde)?,
        q,
        div_u,
        mass_flux_slope: finite("d_m(m h_gl)", kernels.eta.sup_abs_mass_flux_slope() * q)?,
        g0: finite("g0", kernels.g0.sup_abs())?,
        g1: finite("g1", kernels.g1.sup_abs())?,
        n_l1: finite("n", grid.integrate(&n_vals))?,
        h_gl: finite("h_gl", kernels.eta.sup_abs() * q)?,
    })
}

/// Coagulation strength `A0 K` as the sum of the loss and gain suprema,
/// evaluated by trapezoid quadrature at the uniform mass nodes. At `m_A` the
/// gain is taken as its left limit.
pub fn kernel_suprema(kernels: &KernelSet, grid: &MassGrid) -> Result<(f64, f64)> {
    let nodes = grid.nodes();
    let w = grid.weights();
    let h = grid.spacing();
    let mut loss_sup = 0.0f64;
    let mut gain_sup = 0.0f64;
    for i in 0..=grid.upper_index() {
        let m = nodes[i];
        let loss: f64 = nodes
            .iter()
            .zip(w)
            .map(|(&mp, &wj)| wj * kernels.beta_quadrature(m, mp))
            .sum::<f64>()
            * m;
        let mut gain = 0.0;
        for j in 0..=i {
            let wj = if j == 0 || j == i { 0.5 * h } else { h };
            gain += wj * kernels.beta.raw(m - nodes[j], nodes[j]);
        }
        gain *= 0.5 * m;
        loss_sup = loss_sup.max(finite("K loss term", loss)?.abs());
        gain_sup = gain_sup.max(finite("K gain term", gain)?.abs());
    }
    Ok((loss_sup, gain_sup))
}

/// `I J e^{-J} / (J + K I (1 - e^{-J}))`, with the `J -> 0` limit `I / (1 + K I)`.
pub fn sup_bound_formula(i: f64, j: f64, k: f64) -> f64 {
    if j < EPS_J {
        i / (1.0 + k * i)
    } else {
        let e = (-j).exp();
        i * j * e / (j + k * i * (1.0 - e))
    }
}

/// Admissible data size: half of [`sup_bound_formula`].
pub fn data_threshold_formula(i: f64, j: f64, k: f64) -> f64 {
    if j < EPS_J {
        i / (2.0 * (1.0 + k * i))
    } else {
        let e = (-j).exp();
        i * j * e / (2.0 * (j + k * i * (1.0 - e)))
    }
}

/// `I K (1 - e^{-J}) < J`, or `I K < 1` in the `J -> 0` limit.
pub fn contraction_holds(i: f64, j: f64, k: f64) -> bool {
    if j < EPS_J {
        i * k < 1.0
    } else {
        i * k * (1.0 - (-j).exp()) < j
    }
}

fn constants_from(norms: &Norms, kernels: &KernelSet, a0: f64) -> (f64, f64) {
    let i = norms.sigma_tilde + norms.g0 * kernels.n1 * norms.q / a0;
    let j = (norms.div_u + norms.mass_flux_slope + norms.g1 * norms.q + norms.g0 * norms.n_l1 * norms.q) / a0;
    (i, j)
}

/// Computes every constant and condition. `fields_star` are the stationary
/// fields; `grid` must reach at least `max(m_B, m_B*)`.
pub fn compute_constants(
    kernels: &KernelSet,
    fields: &FieldSet,
    fields_star: &FieldSet,
    geometry: &Geometry,
    data: DataNorms,
    lattice: &Lattice,
    grid: &MassGrid,
) -> Result<BoundReport> {
    let norms = field_norms(kernels, fields, geometry, lattice, grid, data.transient)?;
    let norms_star = field_norms(kernels, fields_star, geometry, lattice, grid, data.stationary)?;
    let (i, j) = constants_from(&norms, kernels, fields.a0);
    let (i_star, j_star) = constants_from(&norms_star, kernels, fields_star.a0);
    let (loss_sup, gain_sup) = kernel_suprema(kernels, grid)?;
    let k = (loss_sup + gain_sup) / fields.a0;
    let k_star = (loss_sup + gain_sup) / fields_star.a0;

    let sup_bound = sup_bound_formula(i, j, k);
    let data_threshold = data_threshold_formula(i, j, k);
    let sup_bound_star = sup_bound_formula(i_star, j_star, k_star);
    let data_threshold_star = data_threshold_formula(i_star, j_star, k_star);
    let flags = Flags {
        contraction: contraction_holds(i, j, k),
        data_size: norms.sigma_tilde < data_threshold,
        contraction_star: contraction_holds(i_star, j_star, k_star),
        data_size_star: norms_star.sigma_tilde < data_threshold_star,
    };
    for (name, v) in [
        ("I", i),
        ("J", j),
        ("K", k),
        ("I*", i_star),
        ("J*", j_star),
        ("sup bound", sup_bound),
        ("sup bound*", sup_bound_star),
    ] {
        finite(name, v)?;
    }
    let space_time_points = lattice.space_time(fields, geometry).len();
    Ok(BoundReport {
        i,
        j,
        k,
        i_star,
        j_star,
        m_b: compute_m_b(kernels, fields, norms.h_gl),
        m_b_star: compute_m_b(kernels, fields_star, norms_star.h_gl),
        sup_bound,
        data_threshold,
        sup_bound_star,
        data_threshold_star,
        flags,
        norms,
        norms_star,
        lattice: LatticeReport {
            per_axis: lattice.per_axis,
            horizon: lattice.horizon,
            space_time_points,
            mass_points: lattice.per_axis,
            mass_grid_nodes: grid.len(),
        },
    })
}

/// Human-readable reasons for every failed condition.
pub fn check_conditions(report: &BoundReport) -> Vec<String> {
    let mut out = Vec::new();
    let f = &report.flags;
    if !f.contraction {
        out.push(format!(
            "contraction: I K (1 - e^-J) = {:.6e} is not below J = {:.6e}",
            report.i * report.k * (1.0 - (-report.j).exp()),
            report.j
        ));
    }
    if !f.data_size {
        out.push(format!(
            "data size: ||sigma~|| = {:.6e} is not below {:.6e}",
            report.norms.sigma_tilde, report.data_threshold
        ));
    }
    if !f.contraction_star {
        out.push(format!(
            "stationary contraction: I* K (1 - e^-J*) = {:.6e} is not below J* = {:.6e}",
            report.i_star * report.k * (1.0 - (-report.j_star).exp()),
            report.j_star
        ));
    }
    if !f.data_size_star {
        out.push(format!(
            "stationary data size: ||sigma~1*|| = {:.6e} is not below {:.6e}",
            report.norms_star.sigma_tilde, report.data_threshold_star
        ));
    }
    out
}
