//! Microphysics kernels, driving fields and the pointwise symbols of the
//! transport form of the droplet equation.
//!
//! Everything here is a pure function of its arguments. The solver calls these
//! evaluators from many workers at once.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Spatial point `(x1, x2, x3)`; the strip is `0 < x3 < 1`.
pub type Point = [f64; 3];

#[inline]
pub fn positive_part(q: f64) -> f64 {
    q.max(0.0)
}

#[inline]
pub fn negative_part(q: f64) -> f64 {
    (-q).max(0.0)
}

/// A nonnegative function of droplet mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum MassFunction {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `value` on the closed interval `[lo, hi]`, zero elsewhere.
    Indicator {
        lo: f64,
        hi: f64,
        value: f64,
    },
    /// Piecewise-linear hat: zero outside `[lo, hi]`, `height` at `peak`.
    Hat {
        lo: f64,
        peak: f64,
        hi: f64,
        height: f64,
    },
    /// Linear interpolation between `(m, value)` knots, zero outside the knot range.
    PiecewiseLinear {
        points: Vec<[f64; 2]>,
    },
}

impl MassFunction {
    pub fn hat(lo: f64, peak: f64, hi: f64, height: f64) -> Self {
        MassFunction::Hat { lo, peak, hi, height }
    }

    #[inline]
    pub fn value(&self, m: f64) -> f64 {
        match self {
            MassFunction::Zero => 0.0,
            MassFunction::Constant { value } => *value,
            MassFunction::Indicator { lo, hi, value } => {
                if m >= *lo && m <= *hi {
                    *value
                } else {
                    0.0
                }
            }
            MassFunction::Hat { lo, peak, hi, height } => {
                if m <= *lo || m >= *hi {
                    0.0
                } else if m <= *peak {
                    height * (m - lo) / (peak - lo)
                } else {
                    height * (hi - m) / (hi - peak)
                }
            }
            MassFunction::PiecewiseLinear { points } => {
                let n = points.len();
                if n == 0 || m < points[0][0] || m > points[n - 1][0] {
                    return 0.0;
                }
                if n == 1 {
                    return points[0][1];
                }
                let i = segment_index(points, m);
                let [m0, v0] = points[i];
                let [m1, v1] = points[i + 1];
                if m1 == m0 {
                    v1
                } else {
                    v0 + (v1 - v0) * (m - m0) / (m1 - m0)
                }
            }
        }
    }

    /// Right derivative. Exists everywhere for the piecewise-linear catalog and
    /// equals the classical derivative away from breakpoints.
    #[inline]
    pub fn right_derivative(&self, m: f64) -> f64 {
        match self {
            MassFunction::Zero | MassFunction::Constant { .. } | MassFunction::Indicator { .. } => 0.0,
            MassFunction::Hat { lo, peak, hi, height } => {
                if m < *lo || m >= *hi {
                    0.0
                } else if m < *peak {
                    height / (peak - lo)
                } else {
                    -height / (hi - peak)
                }
            }
            MassFunction::PiecewiseLinear { points } => {
                let n = points.len();
                if n < 2 || m < points[0][0] || m >= points[n - 1][0] {
                    return 0.0;
                }
                let i = segment_index(points, m);
                let [m0, v0] = points[i];
                let [m1, v1] = points[i + 1];
                if m1 == m0 {
                    0.0
                } else {
                    (v1 - v0) / (m1 - m0)
                }
            }
        }
    }

    /// Breakpoints where the derivative may jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            MassFunction::Zero | MassFunction::Constant { .. } => vec![],
            MassFunction::Indicator { lo, hi, .. } => vec![*lo, *hi],
            MassFunction::Hat { lo, peak, hi, .. } => vec![*lo, *peak, *hi],
            MassFunction::PiecewiseLinear { points } => points.iter().map(|p| p[0]).collect(),
        }
    }

    /// Closed support interval, `None` when the support is unbounded.
    pub fn support(&self) -> Option<(f64, f64)> {
        match self {
            MassFunction::Zero => Some((0.0, 0.0)),
            MassFunction::Constant { value } => {
                if *value == 0.0 {
                    Some((0.0, 0.0))
                } else {
                    None
                }
            }
            MassFunction::Indicator { lo, hi, .. } | MassFunction::Hat { lo, hi, .. } => Some((*lo, *hi)),
            MassFunction::PiecewiseLinear { points } => match (points.first(), points.last()) {
                (Some(a), Some(b)) => Some((a[0], b[0])),
                _ => Some((0.0, 0.0)),
            },
        }
    }

    /// True when the function is continuous (hence Lipschitz for this catalog).
    pub fn is_continuous(&self) -> bool {
        match self {
            MassFunction::Zero | MassFunction::Constant { .. } | MassFunction::Hat { .. } => true,
            MassFunction::Indicator { value, .. } => *value == 0.0,
            MassFunction::PiecewiseLinear { points } => match (points.first(), points.last()) {
                (Some(a), Some(b)) => a[1] == 0.0 && b[1] == 0.0,
                _ => true,
            },
        }
    }

    /// Exact `sup |v|`.
    pub fn sup_abs(&self) -> f64 {
        match self {
            MassFunction::Zero => 0.0,
            MassFunction::Constant { value } | MassFunction::Indicator { value, .. } => value.abs(),
            MassFunction::Hat { height, .. } => height.abs(),
            MassFunction::PiecewiseLinear { points } => points.iter().map(|p| p[1].abs()).fold(0.0, f64::max),
        }
    }

    /// Essential supremum of `|v(m) + m v'(m)|`, i.e. of `|d(m v)/dm|`.
    ///
    /// On every linear piece the expression is affine in `m`, so the supremum
    /// is attained at one-sided limits at the breakpoints.
    pub fn sup_abs_mass_flux_slope(&self) -> f64 {
        match self {
            MassFunction::Zero => 0.0,
            MassFunction::Constant { value } | MassFunction::Indicator { value, .. } => value.abs(),
            MassFunction::Hat { lo, peak, hi, height } => {
                let up = height / (peak - lo);
                let down = -height / (hi - peak);
                [*lo * up, height + peak * up, height + peak * down, hi * down]
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max)
            }
            MassFunction::PiecewiseLinear { points } => {
                let mut best: f64 = 0.0;
                for w in points.windows(2) {
                    let [m0, v0] = w[0];
                    let [m1, v1] = w[1];
                    if m1 == m0 {
                        continue;
                    }
                    let slope = (v1 - v0) / (m1 - m0);
                    best = best.max((v0 + m0 * slope).abs()).max((v1 + m1 * slope).abs());
                }
                if points.len() == 1 {
                    best = best.max(points[0][1].abs());
                }
                best
            }
        }
    }
}

fn segment_index(points: &[[f64; 2]], m: f64) -> usize {
    // last i with points[i].0 <= m, capped so that i + 1 is valid
    let n = points.len();
    let idx = points.partition_point(|p| p[0] <= m);
    idx.saturating_sub(1).min(n - 2)
}

/// Coagulation kernel before truncation at `m1 + m2 >= m_A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoagulationKernel {
    /// `b` for every pair.
    TruncatedConstant { b: f64 },
    /// `b * m1 * m2`.
    TruncatedProduct { b: f64 },
    /// Bilinear interpolation of a table on `masses x masses`, zero outside the
    /// table; symmetrized by averaging with its transpose.
    Tabulated { masses: Vec<f64>, values: Vec<Vec<f64>> },
}

impl CoagulationKernel {
    /// Returns the kernel with any tabulated values replaced by
    /// `(B + B^T) / 2`.
    pub fn symmetrized(&self) -> Self {
        match self {
            CoagulationKernel::Tabulated { masses, values } => {
                let n = values.len();
                let mut sym = values.clone();
                for i in 0..n {
                    for j in 0..n {
                        let a = values[i].get(j).copied().unwrap_or(0.0);
                        let b = values.get(j).and_then(|r| r.get(i)).copied().unwrap_or(0.0);
                        sym[i][j] = 0.5 * (a + b);
                    }
                }
                CoagulationKernel::Tabulated {
                    masses: masses.clone(),
                    values: sym,
                }
            }
            other => other.clone(),
        }
    }

    /// Untruncated kernel value.
    #[inline]
    pub fn raw(&self, m1: f64, m2: f64) -> f64 {
        match self {
            CoagulationKernel::TruncatedConstant { b } => *b,
            CoagulationKernel::TruncatedProduct { b } => b * m1 * m2,
            CoagulationKernel::Tabulated { masses, values } => {
                let n = masses.len();
                if n < 2 || m1 < masses[0] || m2 < masses[0] || m1 > masses[n - 1] || m2 > masses[n - 1] {
                    return 0.0;
                }
                let locate = |m: f64| {
                    let i = masses.partition_point(|&x| x <= m).saturating_sub(1).min(n - 2);
                    let w = (m - masses[i]) / (masses[i + 1] - masses[i]);
                    (i, w)
                };
                let (i, wi) = locate(m1);
                let (j, wj) = locate(m2);
                let v = |a: usize, b: usize| values[a][b];
                (1.0 - wi) * (1.0 - wj) * v(i, j)
                    + wi * (1.0 - wj) * v(i + 1, j)
                    + (1.0 - wi) * wj * v(i, j + 1)
                    + wi * wj * v(i + 1, j + 1)
            }
        }
    }
}

/// Microphysics functions and constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    /// Lower droplet mass of the inflow support window.
    #[serde(rename = "m_a")]
    pub m_lower: f64,
    /// Upper droplet mass; the coagulation kernel vanishes beyond it.
    #[serde(rename = "m_A")]
    pub m_upper: f64,
    pub beta: CoagulationKernel,
    #[serde(default)]
    pub g0: MassFunction,
    #[serde(default)]
    pub g1: MassFunction,
    #[serde(default)]
    pub eta: MassFunction,
    #[serde(default)]
    pub n: MassFunction,
    /// Aerosol number per unit air volume.
    #[serde(default = "default_n1")]
    pub n1: f64,
}

fn default_n1() -> f64 {
    1.0
}

impl KernelSet {
    /// Truncated coagulation kernel.
    #[inline]
    pub fn beta(&self, m1: f64, m2: f64) -> f64 {
        if m1 + m2 < self.m_upper {
            self.beta.raw(m1, m2)
        } else {
            0.0
        }
    }

    /// Kernel value used inside mass quadratures. Identical to [`Self::beta`]
    /// except exactly on the truncation line, where the mean of the one-sided
    /// limits is returned so the trapezoid rule keeps its order across the jump.
    #[inline]
    pub fn beta_quadrature(&self, m1: f64, m2: f64) -> f64 {
        let s = m1 + m2;
        let tol = 1e-12 * self.m_upper;
        if s < self.m_upper - tol {
            self.beta.raw(m1, m2)
        } else if s <= self.m_upper + tol {
            0.5 * self.beta.raw(m1, m2)
        } else {
            0.0
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.m_lower > 0.0 && self.m_lower.is_finite()) {
            errors.push("kernels.m_a: must be finite and > 0".into());
        }
        if !(self.m_upper > self.m_lower && self.m_upper.is_finite()) {
            errors.push("kernels.m_A: must be finite and > m_a".into());
        }
        if !(self.n1 > 0.0 && self.n1.is_finite()) {
            errors.push("kernels.n1: must be finite and > 0".into());
        }
        match &self.beta {
            CoagulationKernel::TruncatedConstant { b } | CoagulationKernel::TruncatedProduct { b } => {
                if !(*b >= 0.0 && b.is_finite()) {
                    errors.push("kernels.beta.b: must be finite and >= 0".into());
                }
            }
            CoagulationKernel::Tabulated { masses, values } => {
                if masses.len() < 2 || masses.windows(2).any(|w| w[1] <= w[0]) {
                    errors.push("kernels.beta.masses: need >= 2 strictly increasing nodes".into());
                }
                if values.len() != masses.len() || values.iter().any(|r| r.len() != masses.len()) {
                    errors.push("kernels.beta.values: must be a square table matching masses".into());
                }
                if values.iter().flatten().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    errors.push("kernels.beta.values: entries must be finite and >= 0".into());
                }
            }
        }
        for (name, f) in [("g0", &self.g0), ("g1", &self.g1), ("eta", &self.eta), ("n", &self.n)] {
            validate_mass_function(&format!("kernels.{name}"), f, errors);
        }
        if self.m_upper > self.m_lower && errors.is_empty() {
            let top = 2.0 * self.m_upper;
            let samples = 97;
            let mut asym: f64 = 0.0;
            let mut g0_leak: f64 = 0.0;
            for i in 0..samples {
                let a = top * i as f64 / (samples - 1) as f64;
                if a < self.m_lower || a > self.m_upper {
                    g0_leak = g0_leak.max(self.g0.value(a).abs());
                }
                for j in 0..samples {
                    let b = top * j as f64 / (samples - 1) as f64;
                    asym = asym.max((self.beta(a, b) - self.beta(b, a)).abs());
                }
            }
            if asym > 1e-12 {
                errors.push(format!("kernels.beta: not symmetric (max asymmetry {asym:e})"));
            }
            if g0_leak > 0.0 {
                errors.push("kernels.g0: must vanish outside [m_a, m_A]".into());
            }
        }
        if self.eta.support().is_none() {
            errors.push("kernels.eta: must have compact support".into());
        }
        if !self.eta.is_continuous() {
            errors.push("kernels.eta: must be Lipschitz (continuous piecewise-linear)".into());
        }
        if self.n.support().is_none() {
            errors.push("kernels.n: must be integrable (bounded support)".into());
        }
        if !self.g0.is_continuous() {
            errors.push("kernels.g0: must be continuous".into());
        }
    }
}

pub fn validate_mass_function(name: &str, f: &MassFunction, errors: &mut Vec<String>) {
    let bad = |v: f64| !(v >= 0.0 && v.is_finite());
    match f {
        MassFunction::Zero => {}
        MassFunction::Constant { value } => {
            if bad(*value) {
                errors.push(format!("{name}.value: must be finite and >= 0"));
            }
        }
        MassFunction::Indicator { lo, hi, value } => {
            if bad(*value) {
                errors.push(format!("{name}.value: must be finite and >= 0"));
            }
            if !(lo.is_finite() && hi.is_finite() && *lo >= 0.0 && hi > lo) {
                errors.push(format!("{name}: need 0 <= lo < hi"));
            }
        }
        MassFunction::Hat { lo, peak, hi, height } => {
            if bad(*height) {
                errors.push(format!("{name}.height: must be finite and >= 0"));
            }
            if !(*lo >= 0.0 && lo < peak && peak < hi && hi.is_finite()) {
                errors.push(format!("{name}: need 0 <= lo < peak < hi"));
            }
        }
        MassFunction::PiecewiseLinear { points } => {
            if points.is_empty() {
                errors.push(format!("{name}.points: need at least one knot"));
            }
            if points.windows(2).any(|w| w[1][0] < w[0][0]) {
                errors.push(format!("{name}.points: masses must be nondecreasing"));
            }
            if points.iter().any(|p| bad(p[1]) || !(p[0] >= 0.0 && p[0].is_finite())) {
                errors.push(format!("{name}.points: masses and values must be finite and >= 0"));
            }
        }
    }
}

/// Droplet velocity `u(t, x, m)` with its analytic divergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocityField {
    Constant {
        value: [f64; 3],
    },
    /// Air motion plus mass-dependent terminal fall:
    ///
    /// ```text
    /// u1 = h1 + swirl sin(2 pi x2 / L2)
    /// u2 = h2 + swirl sin(2 pi x1 / L1)
    /// u3 = -(base + mass_coeff m / (m + mass_scale) + stretch x3) - pulse exp(-pulse_decay t)
    /// ```
    ///
    /// The divergence is `-stretch`.
    Falling {
        base: f64,
        #[serde(default)]
        mass_coeff: f64,
        #[serde(default = "one")]
        mass_scale: f64,
        #[serde(default)]
        stretch: f64,
        #[serde(default)]
        horizontal: [f64; 2],
        #[serde(default)]
        swirl: f64,
        #[serde(default)]
        pulse: f64,
        #[serde(default = "one")]
        pulse_decay: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// Supersaturation `Q(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SupersaturationField {
    Constant {
        value: f64,
    },
    /// `bottom + (top - bottom) x3 + pulse exp(-pulse_decay t) + wave cos(2 pi x1 / L1)`.
    Profile {
        bottom: f64,
        top: f64,
        #[serde(default)]
        pulse: f64,
        #[serde(default = "one")]
        pulse_decay: f64,
        #[serde(default)]
        wave: f64,
    },
}

/// Horizontal treatment of the strip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Geometry {
    /// Everything is invariant in `(x1, x2)`.
    #[default]
    Columnar,
    /// `(x1, x2)` live on the torus `[0, L1) x [0, L2)`.
    PeriodicBox { lengths: [f64; 2] },
}

impl Geometry {
    pub fn is_columnar(&self) -> bool {
        matches!(self, Geometry::Columnar)
    }

    /// Box lengths; columnar mode reports unit lengths (never used for wrapping).
    pub fn lengths(&self) -> [f64; 2] {
        match self {
            Geometry::Columnar => [1.0, 1.0],
            Geometry::PeriodicBox { lengths } => *lengths,
        }
    }

    pub fn wrap(&self, x: &mut Point) {
        if let Geometry::PeriodicBox { lengths } = self {
            x[0] = x[0].rem_euclid(lengths[0]);
            x[1] = x[1].rem_euclid(lengths[1]);
        }
    }
}

/// Driving fields plus the fall-speed floor `A0` (`u3 <= -A0`).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub a0: f64,
    pub u: VelocityField,
    pub q: SupersaturationField,
    lengths: [f64; 2],
}

impl FieldSet {
    pub fn new(a0: f64, u: VelocityField, q: SupersaturationField, geometry: &Geometry) -> Self {
        Self {
            a0,
            u,
            q,
            lengths: geometry.lengths(),
        }
    }

    #[inline]
    pub fn velocity(&self, t: f64, x: &Point, m: f64) -> [f64; 3] {
        match &self.u {
            VelocityField::Constant { value } => *value,
            VelocityField::Falling {
                base,
                mass_coeff,
                mass_scale,
                stretch,
                horizontal,
                swirl,
                pulse,
                pulse_decay,
            } => {
                let mut u1 = horizontal[0];
                let mut u2 = horizontal[1];
                if *swirl != 0.0 {
                    u1 += swirl * (TAU * x[1] / self.lengths[1]).sin();
                    u2 += swirl * (TAU * x[0] / self.lengths[0]).sin();
                }
                let mut u3 = -(base + mass_coeff * m / (m + mass_scale) + stretch * x[2]);
                if *pulse != 0.0 {
                    u3 -= pulse * (-pulse_decay * t).exp();
                }
                [u1, u2, u3]
            }
        }
    }

    #[inline]
    pub fn div_u(&self, _t: f64, _x: &Point, _m: f64) -> f64 {
        match &self.u {
            VelocityField::Constant { .. } => 0.0,
            VelocityField::Falling { stretch, .. } => -stretch,
        }
    }

    #[inline]
    pub fn q(&self, t: f64, x: &Point) -> f64 {
        match &self.q {
            SupersaturationField::Constant { value } => *value,
            SupersaturationField::Profile {
                bottom,
                top,
                pulse,
                pulse_decay,
                wave,
            } => {
                let mut q = bottom + (top - bottom) * x[2];
                if *pulse != 0.0 {
                    q += pulse * (-pulse_decay * t).exp();
                }
                if *wave != 0.0 {
                    q += wave * (TAU * x[0] / self.lengths[0]).cos();
                }
                q
            }
        }
    }

    pub fn is_time_independent(&self) -> bool {
        let u_static = match &self.u {
            VelocityField::Constant { .. } => true,
            VelocityField::Falling { pulse, .. } => *pulse == 0.0,
        };
        let q_static = match &self.q {
            SupersaturationField::Constant { .. } => true,
            SupersaturationField::Profile { pulse, .. } => *pulse == 0.0,
        };
        u_static && q_static
    }

    /// The `t -> infinity` limit of these fields (all transient pulses dropped).
    pub fn stationary_limit(&self) -> FieldSet {
        let mut out = self.clone();
        if let VelocityField::Falling { pulse, .. } = &mut out.u {
            *pulse = 0.0;
        }
        if let SupersaturationField::Profile { pulse, .. } = &mut out.q {
            *pulse = 0.0;
        }
        out
    }
}

/// `h_gl(t, x, m) = eta(m) Q(t, x)`.
#[inline]
pub fn eval_h_gl(fields: &FieldSet, kernels: &KernelSet, t: f64, x: &Point, m: f64) -> f64 {
    kernels.eta.value(m) * fields.q(t, x)
}

/// Extended velocity `(u1, u2, u3, m h_gl)` on `(x, m)` space.
#[inline]
pub fn eval_u_tilde(fields: &FieldSet, kernels: &KernelSet, t: f64, x: &Point, m: f64) -> [f64; 4] {
    let u = fields.velocity(t, x, m);
    [u[0], u[1], u[2], m * eval_h_gl(fields, kernels, t, x, m)]
}

/// Linear decay rate `div u + d(m h_gl)/dm - h_gl + g1 [Q]^-`, which reduces to
/// `div u + m eta'(m) Q + g1(m) [Q]^-` with `eta'` the right derivative.
#[inline]
pub fn eval_g_tilde(fields: &FieldSet, kernels: &KernelSet, t: f64, x: &Point, m: f64) -> f64 {
    let q = fields.q(t, x);
    fields.div_u(t, x, m) + m * kernels.eta.right_derivative(m) * q + kernels.g1.value(m) * negative_part(q)
}

/// `d(m h_gl)/dm = (eta + m eta') Q`.
#[inline]
pub fn eval_mass_flux_slope(fields: &FieldSet, kernels: &KernelSet, t: f64, x: &Point, m: f64) -> f64 {
    (kernels.eta.value(m) + m * kernels.eta.right_derivative(m)) * fields.q(t, x)
}
