//! Mass-axis quadrature of the nonlocal collision operators.
//!
//! All integrals use the trapezoid rule on the nodes of a [`MassGrid`]. The
//! coagulation gain is a convolution; on the uniform part of the grid the
//! shifted argument `m - m'` is itself a node, so no interpolation happens
//! inside the integral.

use crate::model::{positive_part, FieldSet, KernelSet, Point};
use serde::Serialize;

/// Nodes `0 = mu_0 < mu_1 < ... ` on the mass axis.
///
/// The grid is uniform with spacing `spacing` up to and including `m_A`, keeps
/// the same spacing up to `m_B` and places a final node exactly at `m_B`. An
/// optional extension past `m_B` continues with the same spacing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassGrid {
    nodes: Vec<f64>,
    #[serde(skip)]
    weights: Vec<f64>,
    spacing: f64,
    /// Index of the node at `m_A`.
    upper_index: usize,
    /// Index of the node at `m_a`, if it could be aligned.
    lower_index: Option<usize>,
    /// Number of leading nodes that sit exactly on `k * spacing`.
    uniform_len: usize,
    m_b: f64,
    m_upper: f64,
}

/// Minimum number of intervals on `[0, m_B]`.
pub const MIN_MASS_INTERVALS: usize = 32;

impl MassGrid {
    /// Builds a grid with roughly `target_nodes` nodes on `[0, m_b]`, snapping
    /// `m_lower` and `m_upper` onto nodes, and extending past `m_b` up to
    /// `m_b * extent`.
    pub fn new(m_lower: f64, m_upper: f64, m_b: f64, target_nodes: usize, extent: f64) -> Self {
        assert!(m_upper > 0.0 && m_b >= m_upper && m_lower > 0.0 && m_lower < m_upper);
        let intervals = target_nodes.saturating_sub(1).max(MIN_MASS_INTERVALS);
        let nominal = m_b / intervals as f64;
        let k_nominal = (m_upper / nominal).ceil().max(1.0) as usize;
        // prefer a spacing that also puts m_a on a node
        let aligned = (k_nominal..=4 * k_nominal).find(|&k| {
            let r = m_lower * k as f64 / m_upper;
            (r - r.round()).abs() < 1e-9
        });
        let k = aligned.unwrap_or(k_nominal);
        let spacing = m_upper / k as f64;
        let lower_index = aligned.map(|k| (m_lower * k as f64 / m_upper).round() as usize);

        let mut nodes: Vec<f64> = (0..=k).map(|i| i as f64 * spacing).collect();
        nodes[k] = m_upper;
        let mut i = k + 1;
        loop {
            let m = i as f64 * spacing;
            if m >= m_b - 1e-9 * spacing {
                break;
            }
            nodes.push(m);
            i += 1;
        }
        let uniform_len = nodes.len();
        if m_b > m_upper {
            nodes.push(m_b);
        }
        let top = m_b * extent.max(1.0);
        let mut j = 1;
        loop {
            let m = m_b + j as f64 * spacing;
            if m > top + 1e-9 * spacing {
                break;
            }
            nodes.push(m);
            j += 1;
        }
        let weights = trapezoid_weights(&nodes);
        Self {
            nodes,
            weights,
            spacing,
            upper_index: k,
            lower_index,
            uniform_len,
            m_b,
            m_upper,
        }
    }

    /// A grid on arbitrary increasing nodes (mainly for tests and references).
    pub fn from_nodes(nodes: Vec<f64>, m_upper: f64, m_b: f64) -> Self {
        let spacing = nodes[1] - nodes[0];
        let uniform_len = nodes
            .iter()
            .enumerate()
            .take_while(|(i, &m)| (m - *i as f64 * spacing).abs() <= 1e-9 * spacing.max(1.0))
            .count();
        let upper_index = nodes
            .iter()
            .position(|&m| (m - m_upper).abs() <= 1e-9 * m_upper)
            .unwrap_or_else(|| nodes.partition_point(|&m| m < m_upper));
        let weights = trapezoid_weights(&nodes);
        Self {
            nodes,
            weights,
            spacing,
            upper_index,
            lower_index: None,
            uniform_len,
            m_b,
            m_upper,
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn m_b(&self) -> f64 {
        self.m_b
    }

    pub fn upper_index(&self) -> usize {
        self.upper_index
    }

    pub fn lower_index(&self) -> Option<usize> {
        self.lower_index
    }

    pub fn top(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Cell index and fractional weight for linear interpolation, `None` outside
    /// `[0, top]`.
    #[inline]
    pub fn locate(&self, m: f64) -> Option<(usize, f64)> {
        let n = self.nodes.len();
        if !(m >= 0.0) || m > self.nodes[n - 1] {
            return None;
        }
        let i = if m < self.nodes[self.uniform_len - 1] {
            ((m / self.spacing) as usize).min(self.uniform_len - 2)
        } else {
            self.nodes.partition_point(|&x| x <= m).saturating_sub(1).min(n - 2)
        };
        let w = (m - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i]);
        Some((i, w.clamp(0.0, 1.0)))
    }

    /// Trapezoid integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = nodes[i + 1] - nodes[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Coagulation gain `Phi[sigma](mu_i) = (mu_i / 2) int_0^mu_i beta(mu_i - m', m') sigma(m') sigma(mu_i - m') dm'`.
pub fn coag_gain(sigma: &[f64], kernels: &KernelSet, grid: &MassGrid, i: usize) -> f64 {
    let nodes = grid.nodes();
    let m = nodes[i];
    if i == 0 || m >= kernels.m_upper * (1.0 - 1e-12) || i >= grid.uniform_len {
        return 0.0;
    }
    let h = grid.spacing;
    let mut acc = 0.0;
    for j in 0..=i {
        let w = if j == 0 || j == i { 0.5 } else { 1.0 };
        acc += w * kernels.beta.raw(nodes[i - j], nodes[j]) * sigma[j] * sigma[i - j];
    }
    0.5 * m * h * acc
}

/// Coagulation loss factor `f[sigma](mu_i) = mu_i int_0^inf beta(mu_i, m') sigma(m') dm'`.
pub fn coag_loss(sigma: &[f64], kernels: &KernelSet, grid: &MassGrid, i: usize) -> f64 {
    let nodes = grid.nodes();
    let m = nodes[i];
    // for m >= m_A the integrand vanishes on (0, inf); the jump sits on the endpoint
    if m >= kernels.m_upper * (1.0 - 1e-12) {
        return 0.0;
    }
    let acc: f64 = grid
        .weights()
        .iter()
        .zip(nodes)
        .zip(sigma)
        .map(|((w, &mp), s)| w * kernels.beta_quadrature(m, mp) * s)
        .sum();
    m * acc
}

/// Aerosol content of droplets, `int n(m) sigma(m) dm`.
pub fn aerosol_count(sigma: &[f64], kernels: &KernelSet, grid: &MassGrid) -> f64 {
    grid.weights()
        .iter()
        .zip(grid.nodes())
        .zip(sigma)
        .map(|((w, &m), s)| w * kernels.n.value(m) * s)
        .sum()
}

/// Droplet appearance source `g0(m) [N1 - N(sigma)]^+ [Q]^+`.
pub fn source_h(
    sigma: &[f64],
    kernels: &KernelSet,
    grid: &MassGrid,
    fields: &FieldSet,
    t: f64,
    x: &Point,
    m: f64,
) -> f64 {
    let count = aerosol_count(sigma, kernels, grid);
    source_h_with_count(count, kernels, fields.q(t, x), m)
}

/// [`source_h`] with the aerosol count and `Q` already evaluated; the count
/// does not depend on `m` and is shared by a whole mass column.
#[inline]
pub fn source_h_with_count(count: f64, kernels: &KernelSet, q: f64, m: f64) -> f64 {
    let g0 = kernels.g0.value(m);
    if g0 == 0.0 {
        return 0.0;
    }
    g0 * positive_part(kernels.n1 - count) * positive_part(q)
}

/// Precomputed kernel matrices for repeated column evaluations on one grid.
#[derive(Debug, Clone)]
pub struct CollisionTables {
    n: usize,
    /// `0.5 * mu_i * h * w_j * beta(mu_{i-j}, mu_j)` for `j <= i`, row-major triangle.
    gain: Vec<f64>,
    gain_offsets: Vec<usize>,
    /// `mu_i * w_j * beta_q(mu_i, mu_j)`, truncated to the nonzero prefix per row.
    loss: Vec<f64>,
    loss_offsets: Vec<usize>,
    /// `w_j * n(mu_j)`.
    aerosol: Vec<f64>,
    coagulating: bool,
}

impl CollisionTables {
    pub fn new(kernels: &KernelSet, grid: &MassGrid) -> Self {
        let nodes = grid.nodes();
        let n = nodes.len();
        let h = grid.spacing;
        let mut gain = Vec::new();
        let mut gain_offsets = Vec::with_capacity(n + 1);
        let mut loss = Vec::new();
        let mut loss_offsets = Vec::with_capacity(n + 1);
        let mut coagulating = false;
        for i in 0..n {
            gain_offsets.push(gain.len());
            let m = nodes[i];
            if i > 0 && i < grid.uniform_len && m < kernels.m_upper * (1.0 - 1e-12) {
                for j in 0..=i {
                    let w = if j == 0 || j == i { 0.5 } else { 1.0 };
                    let v = 0.5 * m * h * w * kernels.beta.raw(nodes[i - j], nodes[j]);
                    coagulating |= v != 0.0;
                    gain.push(v);
                }
            }
            loss_offsets.push(loss.len());
            let row: Vec<f64> = if m >= kernels.m_upper * (1.0 - 1e-12) {
                Vec::new()
            } else {
                (0..n)
                    .map(|j| m * grid.weights()[j] * kernels.beta_quadrature(m, nodes[j]))
                    .collect()
            };
            let len = row.iter().rposition(|&v| v != 0.0).map_or(0, |p| p + 1);
            coagulating |= len > 0;
            loss.extend_from_slice(&row[..len]);
        }
        gain_offsets.push(gain.len());
        loss_offsets.push(loss.len());
        let aerosol = grid
            .weights()
            .iter()
            .zip(nodes)
            .map(|(w, &m)| w * kernels.n.value(m))
            .collect();
        Self {
            n,
            gain,
            gain_offsets,
            loss,
            loss_offsets,
            aerosol,
            coagulating,
        }
    }

    /// False when the kernel vanishes on every node pair.
    pub fn coagulating(&self) -> bool {
        self.coagulating
    }

    pub fn aerosol_count(&self, sigma: &[f64]) -> f64 {
        self.aerosol.iter().zip(sigma).map(|(a, s)| a * s).sum()
    }

    /// Fills `gain[i] = Phi[sigma](mu_i)` and `loss[i] = f[sigma](mu_i)`.
    pub fn columns(&self, sigma: &[f64], gain: &mut [f64], loss: &mut [f64]) {
        debug_assert_eq!(sigma.len(), self.n);
        for i in 0..self.n {
            let row = &self.gain[self.gain_offsets[i]..self.gain_offsets[i + 1]];
            let mut acc = 0.0;
            for (j, k) in row.iter().enumerate() {
                acc += k * sigma[j] * sigma[i - j];
            }
            gain[i] = acc;
            let row = &self.loss[self.loss_offsets[i]..self.loss_offsets[i + 1]];
            loss[i] = row.iter().zip(sigma).map(|(k, s)| k * s).sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoagulationKernel, Geometry, MassFunction, SupersaturationField, VelocityField};
    use approx::assert_abs_diff_eq;

    fn kernels(b: f64) -> KernelSet {
        KernelSet {
            m_lower: 1.0,
            m_upper: 2.0,
            beta: CoagulationKernel::TruncatedConstant { b },
            g0: MassFunction::Indicator {
                lo: 1.0,
                hi: 2.0,
                value: 1.0,
            },
            g1: MassFunction::Zero,
            eta: MassFunction::Zero,
            n: MassFunction::Indicator {
                lo: 0.0,
                hi: 2.0,
                value: 1.0,
            },
            n1: 2.0,
        }
    }

    #[test]
    fn grid_snaps_support_window() {
        let g = MassGrid::new(1.0, 2.0, 2.2, 129, 1.0);
        assert_eq!(g.nodes()[g.upper_index()], 2.0);
        let li = g.lower_index().unwrap();
        assert_abs_diff_eq!(g.nodes()[li], 1.0, epsilon = 1e-14);
        assert_eq!(g.top(), 2.2);
        assert!(g.len() >= 33);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        let g = MassGrid::new(0.7, 2.0, 2.0, 33, 1.3);
        assert_abs_diff_eq!(g.nodes()[g.lower_index().unwrap()], 0.7, epsilon = 1e-12);
        assert!(g.top() <= 2.6 + 1e-9 && g.top() > 2.5);
    }

    #[test]
    fn locate_hits_nodes_exactly() {
        let g = MassGrid::new(1.0, 2.0, 2.1, 65, 1.2);
        for (i, &m) in g.nodes().iter().enumerate() {
            let (c, w) = g.locate(m).unwrap();
            let v = g.nodes()[c] * (1.0 - w) + g.nodes()[c + 1] * w;
            assert_abs_diff_eq!(v, m, epsilon = 1e-14);
            assert!(c == i || c + 1 == i);
        }
        assert!(g.locate(-0.1).is_none());
        assert!(g.locate(g.top() + 1e-6).is_none());
    }

    #[test]
    fn zero_density_gives_zero_operators() {
        let k = kernels(0.1);
        let g = MassGrid::new(1.0, 2.0, 2.0, 65, 1.0);
        let s = vec![0.0; g.len()];
        for i in 0..g.len() {
            assert_eq!(coag_gain(&s, &k, &g, i), 0.0);
            assert_eq!(coag_loss(&s, &k, &g, i), 0.0);
        }
        assert_eq!(aerosol_count(&s, &k, &g), 0.0);
    }

    #[test]
    fn constant_kernel_closed_forms() {
        let k = kernels(0.1);
        let g = MassGrid::new(1.0, 2.0, 2.0, 65, 1.0);
        let s = vec![1.0; g.len()];
        let i1 = g.lower_index().unwrap();
        // Phi = (m/2) b c^2 m, f = m b c (m_A - m)
        assert_abs_diff_eq!(coag_gain(&s, &k, &g, i1), 0.05, epsilon = 1e-14);
        assert_abs_diff_eq!(coag_loss(&s, &k, &g, i1), 0.1, epsilon = 1e-14);
        let ia = g.upper_index();
        assert_eq!(coag_gain(&s, &k, &g, ia), 0.0);
        assert_eq!(coag_loss(&s, &k, &g, ia), 0.0);
    }

    #[test]
    fn aerosol_count_examples() {
        let k = kernels(0.1);
        let g = MassGrid::new(1.0, 2.0, 2.0, 65, 1.0);
        let s = vec![0.5; g.len()];
        assert_abs_diff_eq!(aerosol_count(&s, &k, &g), 1.0, epsilon = 1e-14);
        let mut k = k;
        k.n = MassFunction::hat(1.0, 1.5, 2.0, 1.0);
        let s = vec![1.0; g.len()];
        assert_abs_diff_eq!(aerosol_count(&s, &k, &g), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn source_examples() {
        let k = kernels(0.1);
        let x = [0.0, 0.0, 0.5];
        let dry = FieldSet::new(
            1.0,
            VelocityField::Constant {
                value: [0.0, 0.0, -1.0],
            },
            SupersaturationField::Constant { value: -0.1 },
            &Geometry::Columnar,
        );
        let g = MassGrid::new(1.0, 2.0, 2.0, 65, 1.0);
        let s = vec![0.25; g.len()];
        assert_eq!(source_h(&s, &k, &g, &dry, 0.0, &x, 1.5), 0.0);
        // N(sigma) = 0.5 on [0, 2] -> [N1 - N]^+ = 1.5; with N = 1 the product is 0.3
        assert_abs_diff_eq!(source_h_with_count(1.0, &k, 0.3, 1.5), 0.3);
        assert_eq!(source_h_with_count(2.5, &k, 0.3, 1.5), 0.0);
        assert_eq!(source_h_with_count(1.0, &k, 0.3, 2.5), 0.0);
    }

    #[test]
    fn tables_match_direct_operators() {
        let mut k = kernels(0.3);
        k.beta = CoagulationKernel::TruncatedProduct { b: 0.3 };
        k.n = MassFunction::hat(0.5, 1.0, 2.0, 2.0);
        let g = MassGrid::new(1.0, 2.0, 2.3, 65, 1.1);
        let s: Vec<f64> = g.nodes().iter().map(|m| (1.0 + m).sin().abs()).collect();
        let t = CollisionTables::new(&k, &g);
        let mut gain = vec![0.0; g.len()];
        let mut loss = vec![0.0; g.len()];
        t.columns(&s, &mut gain, &mut loss);
        for i in 0..g.len() {
            assert_abs_diff_eq!(gain[i], coag_gain(&s, &k, &g, i), epsilon = 1e-13);
            assert_abs_diff_eq!(loss[i], coag_loss(&s, &k, &g, i), epsilon = 1e-13);
        }
        assert_abs_diff_eq!(t.aerosol_count(&s), aerosol_count(&s, &k, &g), epsilon = 1e-13);
    }
}
