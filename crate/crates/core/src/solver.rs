//! Semi-Lagrangian Picard solver for the transient (and, with a frozen clock,
//! the stationary) integral equation.
//!
//! One application of the linearized map `Lambda` traces every grid node back
//! to the inflow boundary and evaluates
//!
//! ```text
//! sigma = sigma~(foot) exp(-A(S)) + int_0^S (Phi + h)(s) exp(-A(s)) ds,
//! A(s)  = int_0^s (g~ + f)(s') ds'
//! ```
//!
//! in the backward path parameter `s`, with trapezoid quadrature on the RK4
//! step points. `Phi`, `f` and the aerosol count come from the frozen previous
//! iterate and are interpolated multilinearly; `g~` and `Q` are evaluated
//! analytically.

use crate::characteristics::{Clock, EntryKind, PathPoint, State, Tracer, CROSSING_TOL};
use crate::collision::{CollisionTables, MassGrid};
use crate::error::{Error, Result};
use crate::model::{eval_g_tilde, positive_part, FieldSet, Geometry, KernelSet, MassFunction, Point};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// One-variable multiplier of an inflow profile (in `x3` for the initial
/// slice, in `t` for the top boundary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulation {
    Constant {
        value: f64,
    },
    Linear {
        start: f64,
        slope: f64,
    },
    /// `base + amplitude exp(-rate z)`.
    Exponential {
        base: f64,
        amplitude: f64,
        rate: f64,
    },
    /// `base + amplitude sin(2 pi frequency z)`.
    Sine {
        base: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl Default for Modulation {
    fn default() -> Self {
        Modulation::Constant { value: 1.0 }
    }
}

impl Modulation {
    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            Modulation::Constant { value } => value,
            Modulation::Linear { start, slope } => start + slope * z,
            Modulation::Exponential { base, amplitude, rate } => base + amplitude * (-rate * z).exp(),
            Modulation::Sine {
                base,
                amplitude,
                frequency,
            } => base + amplitude * (std::f64::consts::TAU * frequency * z).sin(),
        }
    }

    /// Value as `z -> infinity`, when it exists.
    pub fn limit(&self) -> Option<f64> {
        match *self {
            Modulation::Constant { value } => Some(value),
            Modulation::Linear { start, slope: 0.0 } => Some(start),
            Modulation::Exponential { base, amplitude, rate } if rate > 0.0 || amplitude == 0.0 => Some(base),
            Modulation::Sine {
                base, amplitude: 0.0, ..
            } => Some(base),
            _ => None,
        }
    }

    /// Largest absolute value over `[0, z_max]`, sampled on `samples` points
    /// (exact for the monotone variants).
    pub fn sup_abs(&self, z_max: f64, samples: usize) -> f64 {
        let n = samples.max(2);
        (0..n)
            .map(|i| self.value(z_max * i as f64 / (n - 1) as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Separable inflow profile `mass(m) * modulation(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflowProfile {
    pub mass: MassFunction,
    #[serde(default)]
    pub modulation: Modulation,
}

impl InflowProfile {
    pub fn zero() -> Self {
        Self {
            mass: MassFunction::Zero,
            modulation: Modulation::default(),
        }
    }

    #[inline]
    pub fn value(&self, z: f64, m: f64) -> f64 {
        let a = self.mass.value(m);
        if a == 0.0 {
            0.0
        } else {
            a * self.modulation.value(z)
        }
    }

    /// `mass(m) * lim modulation`; used for stationary top data.
    pub fn stationary_value(&self, m: f64) -> f64 {
        self.mass.value(m) * self.modulation.limit().unwrap_or(f64::NAN)
    }

    pub fn sup_abs(&self, z_max: f64, samples: usize) -> f64 {
        self.mass.sup_abs() * self.modulation.sup_abs(z_max, samples)
    }
}

/// Data on the inflow boundary: `sigma~0(x3, m)` on `{t = 0}` and
/// `sigma~1(t, m)` on `{x3 = 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflowData {
    pub sigma0: InflowProfile,
    pub sigma1: InflowProfile,
}

impl InflowData {
    /// Mismatch `|sigma~0(1, m) - sigma~1(0, m)|` maximized over `masses`.
    pub fn corner_mismatch(&self, masses: &[f64]) -> f64 {
        masses
            .iter()
            .map(|&m| (self.sigma0.value(1.0, m) - self.sigma1.value(0.0, m)).abs())
            .fold(0.0, f64::max)
    }
}

/// What the backward feet read.
#[derive(Debug, Clone, Copy)]
pub enum Inflow<'a> {
    Transient(&'a InflowData),
    /// Stationary top data; only the top plane is an inflow boundary.
    Stationary(&'a InflowProfile),
}

impl Inflow<'_> {
    #[inline]
    fn at(&self, kind: EntryKind, state: &State) -> f64 {
        match (self, kind) {
            (Inflow::Transient(d), EntryKind::InitialSlice) => d.sigma0.value(state.x[2], state.m),
            (Inflow::Transient(d), EntryKind::TopBoundary) => d.sigma1.value(state.t, state.m),
            (Inflow::Stationary(p), _) => p.stationary_value(state.m),
        }
    }

    fn clock(&self) -> Clock {
        match self {
            Inflow::Transient(_) => Clock::Running,
            Inflow::Stationary(_) => Clock::Frozen,
        }
    }
}

/// Everything `Lambda` needs besides the grid.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub kernels: &'a KernelSet,
    pub fields: &'a FieldSet,
    pub geometry: &'a Geometry,
    pub inflow: Inflow<'a>,
}

/// Uniform axis; periodic axes omit the node at `start + length`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Axis {
    pub start: f64,
    pub step: f64,
    last: f64,
    pub len: usize,
    pub periodic: bool,
}

#[derive(Debug, Clone, Copy)]
struct AxisWeight {
    i: usize,
    j: usize,
    wj: f64,
}

impl Axis {
    pub fn single(value: f64) -> Self {
        Self {
            start: value,
            step: 1.0,
            last: value,
            len: 1,
            periodic: false,
        }
    }

    /// `len` nodes covering `[lo, hi]` inclusive.
    pub fn closed(lo: f64, hi: f64, len: usize) -> Self {
        assert!(len >= 2 && hi > lo);
        Self {
            start: lo,
            step: (hi - lo) / (len - 1) as f64,
            last: hi,
            len,
            periodic: false,
        }
    }

    /// `len` nodes on the circle `[0, length)`.
    pub fn periodic(length: f64, len: usize) -> Self {
        assert!(len >= 1 && length > 0.0);
        Self {
            start: 0.0,
            step: length / len as f64,
            last: length * (len - 1) as f64 / len as f64,
            len,
            periodic: true,
        }
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.len && !self.periodic {
            self.last
        } else {
            self.start + self.step * i as f64
        }
    }

    pub fn end(&self) -> f64 {
        self.node(self.len - 1)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.node(i)).collect()
    }

    fn covers(&self, z: f64) -> bool {
        if self.periodic || self.len == 1 {
            return true;
        }
        let slack = 1e-9 * self.step;
        z >= self.start - slack && z <= self.end() + slack
    }

    #[inline]
    fn weight(&self, z: f64) -> AxisWeight {
        if self.len == 1 {
            return AxisWeight { i: 0, j: 0, wj: 0.0 };
        }
        if self.periodic {
            let r = ((z - self.start) / self.step).rem_euclid(self.len as f64);
            let i = (r.floor() as usize).min(self.len - 1);
            return AxisWeight {
                i,
                j: (i + 1) % self.len,
                wj: (r - i as f64).clamp(0.0, 1.0),
            };
        }
        let r = (z - self.start) / self.step;
        let i = (r.floor().max(0.0) as usize).min(self.len - 2);
        AxisWeight {
            i,
            j: i + 1,
            wj: (r - i as f64).clamp(0.0, 1.0),
        }
    }
}

/// Structured grid: time, two horizontal axes (single nodes in columnar mode),
/// height and mass. Columns (one mass slice each) are numbered
/// `((it * n1 + i1) * n2 + i2) * n3 + i3`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub time: Axis,
    pub x1: Axis,
    pub x2: Axis,
    pub x3: Axis,
    pub mass: MassGrid,
    /// Characteristic step length.
    pub ds: f64,
}

impl Grid {
    pub fn columns(&self) -> usize {
        self.time.len * self.x1.len * self.x2.len * self.x3.len
    }

    pub fn len(&self) -> usize {
        self.columns() * self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(it, i1, i2, i3)` of a column.
    #[inline]
    pub fn column_coords(&self, c: usize) -> (usize, usize, usize, usize) {
        let i3 = c % self.x3.len;
        let r = c / self.x3.len;
        let i2 = r % self.x2.len;
        let r = r / self.x2.len;
        let i1 = r % self.x1.len;
        (r / self.x1.len, i1, i2, i3)
    }

    #[inline]
    pub fn column_index(&self, it: usize, i1: usize, i2: usize, i3: usize) -> usize {
        ((it * self.x1.len + i1) * self.x2.len + i2) * self.x3.len + i3
    }

    pub fn column_point(&self, c: usize) -> (f64, Point) {
        let (it, i1, i2, i3) = self.column_coords(c);
        (
            self.time.node(it),
            [self.x1.node(i1), self.x2.node(i2), self.x3.node(i3)],
        )
    }

    fn covers(&self, t: f64, x: &Point) -> bool {
        self.time.covers(t) && self.x1.covers(x[0]) && self.x2.covers(x[1]) && self.x3.covers(x[2])
    }

    /// Corner columns and weights for multilinear interpolation in `(t, x)`.
    #[inline]
    fn stencil(&self, t: f64, x: &Point) -> Stencil {
        let wt = self.time.weight(t);
        let w1 = self.x1.weight(x[0]);
        let w2 = self.x2.weight(x[1]);
        let w3 = self.x3.weight(x[2]);
        let mut s = Stencil {
            cols: [0; 16],
            w: [0.0; 16],
            n: 0,
        };
        if self.x1.len == 1 && self.x2.len == 1 {
            for (it, a) in [(wt.i, 1.0 - wt.wj), (wt.j, wt.wj)] {
                if a == 0.0 {
                    continue;
                }
                for (i3, d) in [(w3.i, 1.0 - w3.wj), (w3.j, w3.wj)] {
                    if d == 0.0 {
                        continue;
                    }
                    s.cols[s.n] = it * self.x3.len + i3;
                    s.w[s.n] = a * d;
                    s.n += 1;
                }
            }
            return s;
        }
        for (it, a) in [(wt.i, 1.0 - wt.wj), (wt.j, wt.wj)] {
            if a == 0.0 {
                continue;
            }
            for (i1, b) in [(w1.i, 1.0 - w1.wj), (w1.j, w1.wj)] {
                if b == 0.0 {
                    continue;
                }
                for (i2, c) in [(w2.i, 1.0 - w2.wj), (w2.j, w2.wj)] {
                    if c == 0.0 {
                        continue;
                    }
                    for (i3, d) in [(w3.i, 1.0 - w3.wj), (w3.j, w3.wj)] {
                        if d == 0.0 {
                            continue;
                        }
                        s.cols[s.n] = self.column_index(it, i1, i2, i3);
                        s.w[s.n] = a * b * c * d;
                        s.n += 1;
                    }
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
struct Stencil {
    cols: [usize; 16],
    w: [f64; 16],
    n: usize,
}

impl Stencil {
    #[inline]
    fn column_value(&self, per_column: &[f64]) -> f64 {
        (0..self.n).map(|k| self.w[k] * per_column[self.cols[k]]).sum()
    }

    /// Interpolates an interleaved pair array at mass cell `(im, fm)`.
    #[inline]
    fn pair_value(&self, values: &[[f64; 2]], nm: usize, im: usize, fm: f64) -> [f64; 2] {
        let mut acc = [0.0; 2];
        for k in 0..self.n {
            let base = self.cols[k] * nm + im;
            let lo = values[base];
            let v = if fm == 0.0 {
                lo
            } else {
                let hi = values[base + 1];
                [(1.0 - fm) * lo[0] + fm * hi[0], (1.0 - fm) * lo[1] + fm * hi[1]]
            };
            acc[0] += self.w[k] * v[0];
            acc[1] += self.w[k] * v[1];
        }
        acc
    }

    /// Interpolates a nodal array at mass cell `(im, fm)`.
    #[inline]
    fn node_value(&self, values: &[f64], nm: usize, im: usize, fm: f64) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.n {
            let base = self.cols[k] * nm + im;
            let v = if fm == 0.0 {
                values[base]
            } else {
                (1.0 - fm) * values[base] + fm * values[base + 1]
            };
            acc += self.w[k] * v;
        }
        acc
    }
}

/// Nodal density on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    /// Mass slice of one column.
    pub fn column(&self, c: usize) -> &[f64] {
        let nm = self.grid.mass.len();
        &self.values[c * nm..(c + 1) * nm]
    }

    pub fn at(&self, it: usize, i1: usize, i2: usize, i3: usize, im: usize) -> f64 {
        self.values[self.grid.column_index(it, i1, i2, i3) * self.grid.mass.len() + im]
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |a, &v| a.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |a, &v| a.min(v))
    }

    /// Largest `|sigma|` at nodes with `m > m_B`.
    pub fn sup_above(&self, m_b: f64) -> f64 {
        let nm = self.grid.mass.len();
        let first = self.grid.mass.nodes().partition_point(|&m| m <= m_b * (1.0 + 1e-12));
        if first >= nm {
            return 0.0;
        }
        self.values
            .chunks(nm)
            .flat_map(|col| col[first..].iter())
            .fold(0.0, |a, &v| a.max(v.abs()))
    }

    /// Max-node difference to another field on the same grid.
    pub fn max_difference(&self, other: &DensityField) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }

    /// Multilinear interpolation, floored at 0; 0 above `m_B`.
    pub fn evaluate(&self, t: f64, x: &Point, m: f64) -> Result<f64> {
        let g = &self.grid;
        if !g.covers(t, x) || !(m >= 0.0) {
            return Err(Error::OutOfCover(format!("t={t}, x={x:?}, m={m}")));
        }
        if m > g.mass.m_b() {
            return Ok(0.0);
        }
        let Some((im, fm)) = g.mass.locate(m) else {
            return Err(Error::OutOfCover(format!("m={m} beyond the mass grid")));
        };
        let s = g.stencil(t, x);
        Ok(s.node_value(&self.values, g.mass.len(), im, fm).max(0.0))
    }
}

/// Previous-iterate quantities frozen during one application of `Lambda`.
#[derive(Debug, Clone)]
struct Sources {
    /// `[f, Phi]` per node.
    rates: Vec<[f64; 2]>,
    /// Aerosol count per column.
    count: Vec<f64>,
}

impl Sources {
    fn zeros(grid: &Grid) -> Self {
        Self {
            rates: vec![[0.0; 2]; grid.len()],
            count: vec![0.0; grid.columns()],
        }
    }

    /// Recomputes columns with `x3` index in `rows`; returns the number of
    /// negative nodal values floored at 0.
    fn update(&mut self, prev: &DensityField, tables: &CollisionTables, rows: &Range<usize>) -> u64 {
        let nm = prev.grid.mass.len();
        let n3 = prev.grid.x3.len;
        let coag = tables.coagulating();
        self.rates
            .par_chunks_mut(nm)
            .zip(self.count.par_iter_mut())
            .enumerate()
            .filter(|(c, _)| rows.contains(&(c % n3)))
            .map_init(
                || (Vec::new(), vec![0.0; nm], vec![0.0; nm]),
                |(floored, gain, loss), (c, (rates, count))| {
                    let raw = prev.column(c);
                    let clamps = raw.iter().filter(|&&v| v < 0.0).count() as u64;
                    let col: &[f64] = if clamps > 0 {
                        floored.clear();
                        floored.extend(raw.iter().map(|v| v.max(0.0)));
                        floored
                    } else {
                        raw
                    };
                    *count = tables.aerosol_count(col);
                    if coag {
                        tables.columns(col, gain, loss);
                        for (r, (l, g)) in rates.iter_mut().zip(loss.iter().zip(gain.iter())) {
                            *r = [*l, *g];
                        }
                    }
                    clamps
                },
            )
            .sum()
    }
}

/// A point on a backward path with its iterate-independent coefficients.
#[derive(Debug, Clone, Copy)]
struct Sample {
    s: f64,
    t: f64,
    x: Point,
    m: f64,
    g_tilde: f64,
    /// `g0(m) [Q]^+`; the source is `h_coef [N1 - N~]^+`.
    h_coef: f64,
}

impl Sample {
    #[inline]
    fn new(problem: &Problem, s: f64, st: &State) -> Self {
        let g0 = problem.kernels.g0.value(st.m);
        Self {
            s,
            t: st.t,
            x: st.x,
            m: st.m,
            g_tilde: eval_g_tilde(problem.fields, problem.kernels, st.t, &st.x, st.m),
            h_coef: if g0 == 0.0 {
                0.0
            } else {
                g0 * positive_part(problem.fields.q(st.t, &st.x))
            },
        }
    }
}

/// Upper bound on the memory of a [`PathBank`].
pub const PATH_BANK_BYTES: usize = 256 << 20;

/// Full backward paths from every `(x, m)` node to the top plane, traced once.
///
/// With time-independent fields the characteristic through `(t, x, m)` is the
/// time shift of the one through `(t', x, m)`, so a transient node reuses the
/// prefix of its bank path up to `s = t` and finishes with one partial RK4
/// step onto the initial slice.
struct PathBank {
    paths: Vec<Vec<Sample>>,
}

impl PathBank {
    fn estimate_bytes(problem: &Problem, grid: &Grid) -> usize {
        let keys = grid.x1.len * grid.x2.len * grid.x3.len * grid.mass.len();
        let steps = (1.0 / (problem.fields.a0 * grid.ds)).ceil() as usize + 2;
        keys * steps * std::mem::size_of::<Sample>()
    }

    fn build(problem: &Problem, grid: &Grid, tracer: &Tracer) -> Result<Self> {
        let nm = grid.mass.len();
        let keys = grid.x1.len * grid.x2.len * grid.x3.len * nm;
        let frozen = tracer.clone().with_clock(Clock::Frozen);
        let paths: Vec<Result<Vec<Sample>>> = (0..keys)
            .into_par_iter()
            .map_init(Vec::new, |path, key| {
                let im = key % nm;
                let (_, x) = grid.column_point(key / nm);
                let m = grid.mass.nodes()[im];
                let start = State { t: 0.0, x, m };
                frozen
                    .backward_path_into(start, path)
                    .map_err(|e| Error::UnreachableEntry {
                        t: 0.0,
                        x3: x[2],
                        m,
                        source: Box::new(e),
                    })?;
                Ok(path.iter().map(|p| Sample::new(problem, p.s, &p.state)).collect())
            })
            .collect();
        Ok(Self {
            paths: paths.into_iter().collect::<Result<_>>()?,
        })
    }
}

enum PathSource<'a> {
    Direct(Tracer<'a>),
    Bank(Tracer<'a>, PathBank),
}

impl<'a> PathSource<'a> {
    fn new(problem: &Problem<'a>, grid: &Grid) -> Result<Self> {
        let tracer = Tracer::new(problem.fields, problem.kernels, *problem.geometry)
            .with_step(grid.ds)
            .with_clock(problem.inflow.clock());
        if problem.fields.is_time_independent() && PathBank::estimate_bytes(problem, grid) <= PATH_BANK_BYTES {
            let bank = PathBank::build(problem, grid, &tracer)?;
            Ok(PathSource::Bank(tracer, bank))
        } else {
            Ok(PathSource::Direct(tracer))
        }
    }

    /// Fills `out` with the samples of the backward path from node `(c, im)`
    /// and returns the entry.
    fn samples(
        &self,
        problem: &Problem,
        grid: &Grid,
        c: usize,
        im: usize,
        scratch: &mut Vec<PathPoint>,
        out: &mut Vec<Sample>,
    ) -> Result<(EntryKind, State)> {
        let (t, x) = grid.column_point(c);
        let m = grid.mass.nodes()[im];
        let unreachable = |e: Error| Error::UnreachableEntry {
            t,
            x3: x[2],
            m,
            source: Box::new(e),
        };
        out.clear();
        match self {
            PathSource::Direct(tracer) => {
                let entry = tracer
                    .backward_path_into(State { t, x, m }, scratch)
                    .map_err(unreachable)?;
                out.extend(scratch.iter().map(|p| Sample::new(problem, p.s, &p.state)));
                Ok((entry.kind, entry.state))
            }
            PathSource::Bank(tracer, bank) => {
                let key = (c % (grid.x1.len * grid.x2.len * grid.x3.len)) * grid.mass.len() + im;
                let path = &bank.paths[key];
                let top = path.last().expect("nonempty path");
                let frozen = problem.inflow.clock() == Clock::Frozen;
                if frozen || top.s <= t {
                    out.extend(path.iter().map(|p| Sample {
                        t: if frozen { t } else { t - p.s },
                        ..*p
                    }));
                    let foot = out.last().unwrap();
                    let state = State {
                        t: foot.t.max(0.0),
                        x: foot.x,
                        m: foot.m,
                    };
                    return Ok((EntryKind::TopBoundary, state));
                }
                let k = path.partition_point(|p| p.s <= t) - 1;
                out.extend(path[..=k].iter().map(|p| Sample { t: t - p.s, ..*p }));
                let last = path[k];
                let state = if last.s == t {
                    State {
                        t: 0.0,
                        x: last.x,
                        m: last.m,
                    }
                } else {
                    let from = State {
                        t: t - last.s,
                        x: last.x,
                        m: last.m,
                    };
                    let mut st = tracer.backward_step(&from, t - last.s).map_err(unreachable)?;
                    st.t = 0.0;
                    out.push(Sample::new(problem, t, &st));
                    st
                };
                let kind = if state.x[2] >= 1.0 - CROSSING_TOL {
                    EntryKind::TopBoundary
                } else {
                    EntryKind::InitialSlice
                };
                Ok((kind, state))
            }
        }
    }
}

/// Trapezoid evaluation of the representation formula along one path.
#[inline]
fn integrate_path(samples: &[Sample], foot: f64, grid: &Grid, sources: &Sources, coag: bool, n1: f64) -> f64 {
    let nm = grid.mass.len();
    let mut decay = 0.0;
    let mut forcing = 0.0;
    let (mut pa, mut pb, mut pe, mut ps) = (0.0, 0.0, 1.0, 0.0);
    for (k, p) in samples.iter().enumerate() {
        let mut a = p.g_tilde;
        let mut b = 0.0;
        if coag || p.h_coef != 0.0 {
            let st = grid.stencil(p.t, &p.x);
            if coag {
                if let Some((jm, fm)) = grid.mass.locate(p.m) {
                    let [l, g] = st.pair_value(&sources.rates, nm, jm, fm);
                    a += l;
                    b += g;
                }
            }
            if p.h_coef != 0.0 {
                b += p.h_coef * positive_part(n1 - st.column_value(&sources.count));
            }
        }
        if k > 0 {
            let ds = p.s - ps;
            decay += 0.5 * ds * (pa + a);
            let e = (-decay).exp();
            forcing += 0.5 * ds * (pb * pe + b * e);
            pe = e;
        }
        pa = a;
        pb = b;
        ps = p.s;
    }
    foot * pe + forcing
}

/// Per-application counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepStats {
    pub clamps: u64,
    pub top_entries: u64,
    pub slice_entries: u64,
}

impl StepStats {
    fn add(&mut self, o: &StepStats) {
        self.clamps += o.clamps;
        self.top_entries += o.top_entries;
        self.slice_entries += o.slice_entries;
    }
}

/// Applies `Lambda` to the columns whose `x3` index lies in `rows`, writing
/// into `out`; other columns are left untouched.
fn apply_lambda(
    problem: &Problem,
    paths: &PathSource,
    sources: &Sources,
    tables: &CollisionTables,
    out: &mut DensityField,
    rows: &Range<usize>,
) -> Result<StepStats> {
    let grid = out.grid.clone();
    let nm = grid.mass.len();
    let n3 = grid.x3.len;
    let coag = tables.coagulating();
    let n1 = problem.kernels.n1;

    let results: Vec<Result<StepStats>> = out
        .values
        .par_chunks_mut(nm)
        .enumerate()
        .filter(|(c, _)| rows.contains(&(c % n3)))
        .map_init(
            || (Vec::<PathPoint>::new(), Vec::<Sample>::new()),
            |(scratch, samples), (c, col)| {
                let mut stats = StepStats::default();
                for (im, slot) in col.iter_mut().enumerate() {
                    let (kind, foot_state) = paths.samples(problem, &grid, c, im, scratch, samples)?;
                    match kind {
                        EntryKind::TopBoundary => stats.top_entries += 1,
                        EntryKind::InitialSlice => stats.slice_entries += 1,
                    }
                    let foot = problem.inflow.at(kind, &foot_state);
                    let mut v = integrate_path(samples, foot, &grid, sources, coag, n1);
                    if v < 0.0 {
                        stats.clamps += 1;
                        v = 0.0;
                    }
                    *slot = v;
                }
                Ok(stats)
            },
        )
        .collect();
    let mut total = StepStats::default();
    for r in results {
        total.add(&r?);
    }
    Ok(total)
}

/// Single application of `Lambda` to `prev` on all nodes.
pub fn linear_step(problem: &Problem, prev: &DensityField) -> Result<(DensityField, StepStats)> {
    let tables = CollisionTables::new(problem.kernels, &prev.grid.mass);
    let paths = PathSource::new(problem, &prev.grid)?;
    let rows = 0..prev.grid.x3.len;
    let mut sources = Sources::zeros(&prev.grid);
    let clamps = sources.update(prev, &tables, &rows);
    let mut out = prev.clone();
    let mut stats = apply_lambda(problem, &paths, &sources, &tables, &mut out, &rows)?;
    stats.clamps += clamps;
    Ok((out, stats))
}

/// `Lambda(prev)` evaluated directly at arbitrary `(t, x, m)` points (off the
/// grid), tracing each point afresh.
pub fn lambda_at(problem: &Problem, prev: &DensityField, points: &[(f64, Point, f64)]) -> Result<Vec<f64>> {
    let grid = &prev.grid;
    let tables = CollisionTables::new(problem.kernels, &grid.mass);
    let mut sources = Sources::zeros(grid);
    sources.update(prev, &tables, &(0..grid.x3.len));
    let tracer = Tracer::new(problem.fields, problem.kernels, *problem.geometry)
        .with_step(grid.ds)
        .with_clock(problem.inflow.clock());
    let coag = tables.coagulating();
    points
        .par_iter()
        .map_init(Vec::<PathPoint>::new, |scratch, &(t, x, m)| {
            let entry = tracer.backward_path_into(State { t, x, m }, scratch)?;
            let samples: Vec<Sample> = scratch.iter().map(|p| Sample::new(problem, p.s, &p.state)).collect();
            let foot = problem.inflow.at(entry.kind, &entry.state);
            Ok(integrate_path(&samples, foot, grid, &sources, coag, problem.kernels.n1).max(0.0))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Global,
    Strip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol_fix: f64,
    pub max_iterations: usize,
    pub mode: Mode,
    pub strip_width: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_fix: 1e-10,
            max_iterations: 50,
            mode: Mode::Global,
            strip_width: 0.25,
        }
    }
}

/// Convergence history of one band (the whole strip in global mode).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandLog {
    /// `x3` node indices `[lo, hi)` solved in this band.
    pub rows: [usize; 2],
    /// `||sigma_k - sigma_{k-1}||` over the band's nodes, one per application.
    pub differences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardLog {
    pub mode: Mode,
    /// Total applications of `Lambda` over all bands.
    pub iterations: usize,
    pub bands: Vec<BandLog>,
    pub clamp_count: u64,
    pub top_entries: u64,
    pub slice_entries: u64,
}

impl PicardLog {
    /// Difference norms of the global iteration (or the concatenation over bands).
    pub fn differences(&self) -> Vec<f64> {
        self.bands.iter().flat_map(|b| b.differences.iter().copied()).collect()
    }

    pub fn final_difference(&self) -> f64 {
        self.bands
            .iter()
            .filter_map(|b| b.differences.last().copied())
            .fold(0.0, f64::max)
    }
}

/// `x3` index ranges of the bands, from the top band down. Band `b` owns the
/// nodes with `x3` in `(1 - (b + 1) delta, 1 - b delta]`; the last band also
/// owns `x3 = 0`.
pub fn strip_bands(x3: &Axis, delta: f64) -> Vec<Range<usize>> {
    let count = ((1.0 / delta) - 1e-9).ceil().max(1.0) as usize;
    let band_of =
        |i: usize| -> usize { (((1.0 - x3.node(i)) / delta - 1e-9).ceil().max(1.0) as usize - 1).min(count - 1) };
    let mut out = Vec::new();
    for b in 0..count {
        let rows: Vec<usize> = (0..x3.len).filter(|&i| band_of(i) == b).collect();
        if let (Some(&lo), Some(&hi)) = (rows.first(), rows.last()) {
            out.push(lo..hi + 1);
        }
    }
    out
}

/// Picard iteration `sigma_{k+1} = Lambda(sigma_k)` from `sigma_0 = 0`.
pub fn picard_solve(problem: &Problem, grid: Grid, opts: &SolverOptions) -> Result<(DensityField, PicardLog)> {
    let tables = CollisionTables::new(problem.kernels, &grid.mass);
    let paths = PathSource::new(problem, &grid)?;
    let all = 0..grid.x3.len;
    let bands = match opts.mode {
        Mode::Global => vec![all],
        Mode::Strip => strip_bands(&grid.x3, opts.strip_width),
    };
    let mut current = DensityField::zeros(grid.clone());
    let mut next = current.clone();
    let mut sources = Sources::zeros(&grid);
    let mut log = PicardLog {
        mode: opts.mode,
        iterations: 0,
        bands: Vec::new(),
        clamp_count: 0,
        top_entries: 0,
        slice_entries: 0,
    };
    let nm = grid.mass.len();
    let n3 = grid.x3.len;
    for rows in bands {
        let mut band = BandLog {
            rows: [rows.start, rows.end],
            differences: Vec::new(),
        };
        let mut converged = false;
        for _ in 0..opts.max_iterations {
            log.clamp_count += sources.update(&current, &tables, &rows);
            let stats = apply_lambda(problem, &paths, &sources, &tables, &mut next, &rows)?;
            log.iterations += 1;
            log.clamp_count += stats.clamps;
            log.top_entries += stats.top_entries;
            log.slice_entries += stats.slice_entries;
            let diff = current
                .values
                .par_chunks(nm)
                .zip(next.values.par_chunks(nm))
                .enumerate()
                .filter(|(c, _)| rows.contains(&(c % n3)))
                .map(|(_, (a, b))| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
                .reduce(|| 0.0, f64::max);
            band.differences.push(diff);
            std::mem::swap(&mut current, &mut next);
            if diff < opts.tol_fix {
                converged = true;
                break;
            }
        }
        // keep the untouched buffer in step with the accepted iterate
        next.values.copy_from_slice(&current.values);
        log.bands.push(band);
        if !converged {
            return Err(Error::NoConvergence {
                iterations: log.iterations,
                last_difference: log.final_difference(),
            });
        }
    }
    Ok((current, log))
}

/// Runs `f` on a pool with `threads` workers (the global pool when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::ResourceGuard(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
