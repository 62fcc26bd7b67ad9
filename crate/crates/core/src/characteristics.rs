//! Characteristic flow of the extended velocity field on `(t, x, m)`.
//!
//! Paths are integrated with fixed-step RK4. Boundary crossings (`x3 = 1`
//! backward, `x3 = 0` forward) are located inside the last step by a bracketed
//! root search on restarted partial RK4 steps.

use crate::error::{Error, Result};
use crate::model::{eval_u_tilde, FieldSet, Geometry, KernelSet, Point};
use serde::Serialize;

/// Tolerance on `x3` for located boundary crossings.
pub const CROSSING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct State {
    pub t: f64,
    pub x: Point,
    pub m: f64,
}

impl State {
    pub fn new(t: f64, x3: f64, m: f64) -> Self {
        Self {
            t,
            x: [0.0, 0.0, x3],
            m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Foot on `{t = 0}`.
    InitialSlice,
    /// Foot on the top plane `x3 = 1`.
    TopBoundary,
}

/// Where a backward characteristic meets the inflow boundary. `state.t` is the
/// entry time `tau_-`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Entry {
    pub kind: EntryKind,
    pub state: State,
    /// Path length from the traced point back to the entry.
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathPoint {
    pub s: f64,
    pub state: State,
}

/// One traced characteristic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CharPath {
    pub start: State,
    pub points: Vec<PathPoint>,
    /// Path length at which `x3` reached 0 (forward traces only).
    pub exit_s: Option<f64>,
}

impl CharPath {
    /// Crossing-time law `s1 <= x3_start / A0`.
    pub fn crossing_bound_holds(&self, a0: f64, tol: f64) -> bool {
        match self.exit_s {
            Some(s) => s > 0.0 && s <= self.start.x[2] / a0 + tol,
            None => true,
        }
    }

    /// Mass growth bound `M(s) <= m_start exp(s ||h_gl||)` at every recorded point.
    pub fn mass_bound_holds(&self, h_gl_sup: f64, rel_tol: f64) -> bool {
        self.points
            .iter()
            .all(|p| p.state.m <= self.start.m * (p.s * h_gl_sup).exp() * (1.0 + rel_tol))
    }

    pub fn end(&self) -> &PathPoint {
        self.points.last().expect("a path holds at least its start")
    }
}

/// How time behaves along a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// `t(s) = t_start +/- s`; the initial slice bounds backward traces.
    Running,
    /// Stationary flow: fields are evaluated at the frozen start time and only
    /// the top plane bounds backward traces.
    Frozen,
}

/// Fixed-step RK4 integrator for the characteristic flow.
#[derive(Debug, Clone)]
pub struct Tracer<'a> {
    fields: &'a FieldSet,
    kernels: &'a KernelSet,
    geometry: Geometry,
    ds: f64,
    clock: Clock,
}

/// Default step: `min(1e-2, 1 / (20 A0))`.
pub fn default_step(a0: f64) -> f64 {
    (1e-2f64).min(1.0 / (20.0 * a0))
}

impl<'a> Tracer<'a> {
    pub fn new(fields: &'a FieldSet, kernels: &'a KernelSet, geometry: Geometry) -> Self {
        Self {
            fields,
            kernels,
            geometry,
            ds: default_step(fields.a0),
            clock: Clock::Running,
        }
    }

    pub fn with_step(mut self, ds: f64) -> Self {
        assert!(ds > 0.0);
        self.ds = ds;
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn step(&self) -> f64 {
        self.ds
    }

    #[inline]
    fn rate(&self, t: f64, y: &[f64; 4]) -> [f64; 4] {
        let x = [y[0], y[1], y[2]];
        let mut r = eval_u_tilde(self.fields, self.kernels, t, &x, y[3]);
        if self.geometry.is_columnar() {
            r[0] = 0.0;
            r[1] = 0.0;
        }
        r
    }

    /// One RK4 step of signed length `h` in `s` starting at time `t`.
    #[inline]
    fn rk4(&self, t: f64, y: &[f64; 4], h: f64) -> ([f64; 4], f64) {
        let dt = match self.clock {
            Clock::Running => h,
            Clock::Frozen => 0.0,
        };
        let k1 = self.rate(t, y);
        let y2 = axpy(y, 0.5 * h, &k1);
        let k2 = self.rate(t + 0.5 * dt, &y2);
        let y3 = axpy(y, 0.5 * h, &k2);
        let k3 = self.rate(t + 0.5 * dt, &y3);
        let y4 = axpy(y, h, &k3);
        let k4 = self.rate(t + dt, &y4);
        let mut out = *y;
        for i in 0..4 {
            out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let reach = 2.0 * h.abs() * [k1[2], k2[2], k3[2], k4[2]].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        (out, reach)
    }

    fn advance(&self, t: f64, y: &[f64; 4], h: f64, s: f64) -> Result<([f64; 4], f64)> {
        let (mut out, reach) = self.rk4(t, y, h);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepFailure {
                s,
                reason: "non-finite state".into(),
            });
        }
        if out[2] > 1.0 + reach + 1e-12 || out[2] < -reach - 1e-12 {
            return Err(Error::StepFailure {
                s,
                reason: format!("x3 = {} left the strip by more than one step's reach", out[2]),
            });
        }
        let mut x = [out[0], out[1], out[2]];
        self.geometry.wrap(&mut x);
        out[0] = x[0];
        out[1] = x[1];
        Ok((out, reach))
    }

    fn time_after(&self, t: f64, h: f64) -> f64 {
        match self.clock {
            Clock::Running => t + h,
            Clock::Frozen => t,
        }
    }

    fn step_budget(&self, span: f64) -> usize {
        (span / self.ds).ceil() as usize + 16
    }

    /// Finds `theta` in `(0, h]` (sign of `h` kept) with `x3(theta) = target`
    /// when `x3(0)` and `x3(h)` bracket `target`.
    fn refine_crossing(&self, t: f64, y: &[f64; 4], h: f64, target: f64, s: f64) -> Result<(f64, [f64; 4])> {
        let f0 = y[2] - target;
        let mut lo = 0.0;
        let mut f_lo = f0;
        let mut hi = 1.0;
        let (mut y_hi, _) = self.advance(t, y, h, s)?;
        let mut f_hi = y_hi[2] - target;
        if f_hi.abs() <= CROSSING_TOL {
            return Ok((h, y_hi));
        }
        let mut side = 0i8;
        for _ in 0..200 {
            // false position, with halving of the stale end (Illinois) and a
            // bisection fallback when the update stalls
            let mut theta = if (f_hi - f_lo).abs() > 0.0 {
                lo - f_lo * (hi - lo) / (f_hi - f_lo)
            } else {
                0.5 * (lo + hi)
            };
            if !(theta > lo && theta < hi) {
                theta = 0.5 * (lo + hi);
            }
            let (y_mid, _) = self.advance(t, y, theta * h, s)?;
            let f_mid = y_mid[2] - target;
            if f_mid.abs() <= CROSSING_TOL || (hi - lo) * h.abs() < 1e-15 {
                return Ok((theta * h, y_mid));
            }
            if (f_mid < 0.0) == (f_lo < 0.0) {
                lo = theta;
                f_lo = f_mid;
                if side == -1 {
                    f_hi *= 0.5;
                }
                side = -1;
            } else {
                hi = theta;
                f_hi = f_mid;
                y_hi = y_mid;
                if side == 1 {
                    f_lo *= 0.5;
                }
                side = 1;
            }
        }
        Ok((hi * h, y_hi))
    }

    /// One unchecked backward RK4 step of length `h` (no boundary handling).
    pub fn backward_step(&self, start: &State, h: f64) -> Result<State> {
        let y = [start.x[0], start.x[1], start.x[2], start.m];
        let (y, _) = self.advance(start.t, &y, -h, 0.0)?;
        Ok(State {
            t: self.time_after(start.t, -h),
            x: [y[0], y[1], y[2]],
            m: y[3],
        })
    }

    /// Integrates forward from `start` until `x3` reaches 0 or `t` reaches
    /// `horizon` (ignored with a frozen clock).
    pub fn trace_forward(&self, start: State, horizon: Option<f64>) -> Result<CharPath> {
        let mut points = vec![PathPoint { s: 0.0, state: start }];
        let mut y = [start.x[0], start.x[1], start.x[2], start.m];
        let mut t = start.t;
        let mut s = 0.0;
        let span = match (self.clock, horizon) {
            (Clock::Running, Some(h)) => (h - start.t).max(0.0),
            _ => 1.0 / self.fields.a0,
        };
        let budget = self.step_budget(span.max(start.x[2] / self.fields.a0));
        let mut exit_s = None;
        if start.x[2] <= 0.0 {
            exit_s = Some(0.0);
        }
        let mut steps = 0;
        while exit_s.is_none() {
            let mut h = self.ds;
            let mut at_horizon = false;
            if let (Clock::Running, Some(end)) = (self.clock, horizon) {
                let left = end - t;
                if left <= 0.0 {
                    break;
                }
                if left <= h {
                    h = left;
                    at_horizon = true;
                }
            }
            let (y_new, _) = self.advance(t, &y, h, s)?;
            if y_new[2] <= 0.0 {
                let (theta, y_hit) = self.refine_crossing(t, &y, h, 0.0, s)?;
                s += theta;
                t = self.time_after(t, theta);
                y = y_hit;
                y[2] = 0.0;
                exit_s = Some(s);
            } else {
                s += h;
                t = if at_horizon {
                    horizon.unwrap()
                } else {
                    self.time_after(t, h)
                };
                y = y_new;
            }
            points.push(PathPoint {
                s,
                state: State {
                    t,
                    x: [y[0], y[1], y[2]],
                    m: y[3],
                },
            });
            if at_horizon {
                break;
            }
            steps += 1;
            if steps > budget && horizon.is_none() {
                return Err(Error::StepFailure {
                    s,
                    reason: "bottom of the strip not reached within the step budget".into(),
                });
            }
        }
        Ok(CharPath { start, points, exit_s })
    }

    /// Traces backward from `(t, x, m)` to the inflow boundary. Returns the
    /// entry; `entry.state.t` is `tau_-`.
    pub fn trace_backward(&self, t: f64, x: Point, m: f64) -> Result<Entry> {
        let mut buf = Vec::new();
        self.backward_path_into(State { t, x, m }, &mut buf)
    }

    /// Full backward path; `out[0]` is the start and the last point is the entry.
    pub fn backward_path(&self, start: State) -> Result<(Vec<PathPoint>, Entry)> {
        let mut buf = Vec::new();
        let entry = self.backward_path_into(start, &mut buf)?;
        Ok((buf, entry))
    }

    /// Allocation-free variant of [`Self::backward_path`] for hot loops.
    pub fn backward_path_into(&self, start: State, out: &mut Vec<PathPoint>) -> Result<Entry> {
        out.clear();
        out.push(PathPoint { s: 0.0, state: start });
        let running = self.clock == Clock::Running;
        if start.x[2] >= 1.0 {
            return Ok(Entry {
                kind: EntryKind::TopBoundary,
                state: State {
                    x: [start.x[0], start.x[1], 1.0],
                    ..start
                },
                s: 0.0,
            });
        }
        if running && start.t <= 0.0 {
            return Ok(Entry {
                kind: EntryKind::InitialSlice,
                state: State { t: 0.0, ..start },
                s: 0.0,
            });
        }
        let mut y = [start.x[0], start.x[1], start.x[2], start.m];
        let mut t = start.t;
        let mut s = 0.0;
        let budget = self.step_budget((1.0 - start.x[2]) / self.fields.a0);
        for _ in 0..budget {
            let mut h = self.ds;
            let mut hits_slice = false;
            if running && t <= h {
                h = t;
                hits_slice = true;
            }
            let (y_new, _) = self.advance(t, &y, -h, s)?;
            if y_new[2] >= 1.0 {
                let (theta, y_hit) = self.refine_crossing(t, &y, -h, 1.0, s)?;
                s -= theta;
                t = if running { t + theta } else { t };
                let state = State {
                    t: if running { t.max(0.0) } else { t },
                    x: [y_hit[0], y_hit[1], 1.0],
                    m: y_hit[3],
                };
                out.push(PathPoint { s, state });
                return Ok(Entry {
                    kind: EntryKind::TopBoundary,
                    state,
                    s,
                });
            }
            s += h;
            t = if hits_slice { 0.0 } else { self.time_after(t, -h) };
            y = y_new;
            let state = State {
                t,
                x: [y[0], y[1], y[2]],
                m: y[3],
            };
            out.push(PathPoint { s, state });
            if hits_slice {
                // feet at the corner belong to the top plane
                let kind = if y[2] >= 1.0 - CROSSING_TOL {
                    EntryKind::TopBoundary
                } else {
                    EntryKind::InitialSlice
                };
                return Ok(Entry { kind, state, s });
            }
        }
        Err(Error::StepFailure {
            s,
            reason: "inflow boundary not reached within the step budget".into(),
        })
    }
}

#[inline]
fn axpy(y: &[f64; 4], a: f64, k: &[f64; 4]) -> [f64; 4] {
    [y[0] + a * k[0], y[1] + a * k[1], y[2] + a * k[2], y[3] + a * k[3]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoagulationKernel, MassFunction, SupersaturationField, VelocityField};
    use approx::assert_abs_diff_eq;

    fn kernels(eta: MassFunction) -> KernelSet {
        KernelSet {
            m_lower: 1.0,
            m_upper: 2.0,
            beta: CoagulationKernel::TruncatedConstant { b: 0.0 },
            g0: MassFunction::Zero,
            g1: MassFunction::Zero,
            eta,
            n: MassFunction::Zero,
            n1: 1.0,
        }
    }

    fn constant_fields(u3: f64, q: f64) -> FieldSet {
        FieldSet::new(
            -u3,
            VelocityField::Constant { value: [0.0, 0.0, u3] },
            SupersaturationField::Constant { value: q },
            &Geometry::Columnar,
        )
    }

    #[test]
    fn forward_constant_fall() {
        let f = constant_fields(-1.0, 0.0);
        let k = kernels(MassFunction::Zero);
        let tr = Tracer::new(&f, &k, Geometry::Columnar);
        let path = tr.trace_forward(State::new(0.0, 1.0, 1.5), None).unwrap();
        let s1 = path.exit_s.unwrap();
        assert_abs_diff_eq!(s1, 1.0, epsilon = 1e-10);
        for p in &path.points {
            assert_abs_diff_eq!(p.state.x[2], 1.0 - p.s, epsilon = 1e-10);
            assert_eq!(p.state.m, 1.5);
        }
    }

    #[test]
    fn forward_fast_fall_hits_crossing_bound() {
        let f = constant_fields(-2.0, 0.0);
        let k = kernels(MassFunction::Zero);
        let tr = Tracer::new(&f, &k, Geometry::Columnar);
        let path = tr.trace_forward(State::new(0.0, 1.0, 1.5), None).unwrap();
        assert_abs_diff_eq!(path.exit_s.unwrap(), 0.5, epsilon = 1e-10);
        assert!(path.crossing_bound_holds(2.0, 1e-8));
    }

    #[test]
    fn exponential_mass_growth() {
        // eta = 1 on the masses visited, Q = 1: dM/ds = M
        let eta = MassFunction::PiecewiseLinear {
            points: vec![[0.0, 1.0], [10.0, 1.0]],
        };
        let f = constant_fields(-1.0, 1.0);
        let k = kernels(eta);
        let tr = Tracer::new(&f, &k, Geometry::Columnar).with_step(1e-2);
        let path = tr.trace_forward(State::new(0.0, 1.0, 1.0), Some(0.3)).unwrap();
        let end = path.end();
        assert_abs_diff_eq!(end.s, 0.3, epsilon = 1e-12);
        assert!((end.state.m - 0.3f64.exp()).abs() < 1e-8);
        assert_abs_diff_eq!(end.state.m, 1.34986, epsilon = 1e-5);
    }

    #[test]
    fn backward_examples() {
        let f = constant_fields(-1.0, 0.0);
        let k = kernels(MassFunction::Zero);
        let tr = Tracer::new(&f, &k, Geometry::Columnar);

        let e = tr.trace_backward(5.0, [0.0, 0.0, 0.3], 1.5).unwrap();
        assert_eq!(e.kind, EntryKind::TopBoundary);
        assert_abs_diff_eq!(e.state.t, 4.3, epsilon = 1e-10);
        assert_eq!(e.state.x[2], 1.0);
        assert_eq!(e.state.m, 1.5);

        let e = tr.trace_backward(0.2, [0.0, 0.0, 0.5], 1.5).unwrap();
        assert_eq!(e.kind, EntryKind::InitialSlice);
        assert_eq!(e.state.t, 0.0);
        assert_abs_diff_eq!(e.state.x[2], 0.7, epsilon = 1e-12);

        let e = tr.trace_backward(0.2, [0.0, 0.0, 0.9], 1.5).unwrap();
        assert_eq!(e.kind, EntryKind::TopBoundary);
        assert_abs_diff_eq!(e.state.t, 0.1, epsilon = 1e-10);
    }

    #[test]
    fn frozen_clock_only_stops_at_top() {
        let f = constant_fields(-1.0, 0.0);
        let k = kernels(MassFunction::Zero);
        let tr = Tracer::new(&f, &k, Geometry::Columnar).with_clock(Clock::Frozen);
        let e = tr.trace_backward(0.0, [0.0, 0.0, 0.25], 1.2).unwrap();
        assert_eq!(e.kind, EntryKind::TopBoundary);
        assert_abs_diff_eq!(e.s, 0.75, epsilon = 1e-10);
    }

    #[test]
    fn zero_mass_stays_zero() {
        let eta = MassFunction::hat(0.0, 1.0, 3.0, 0.5);
        let f = constant_fields(-1.0, 0.4);
        let k = kernels(eta);
        let tr = Tracer::new(&f, &k, Geometry::Columnar);
        let path = tr.trace_forward(State::new(0.0, 1.0, 0.0), None).unwrap();
        assert!(path.points.iter().all(|p| p.state.m == 0.0));
    }

    #[test]
    fn periodic_mode_wraps_horizontal_position() {
        let geometry = Geometry::PeriodicBox { lengths: [1.0, 2.0] };
        let f = FieldSet::new(
            1.0,
            VelocityField::Constant {
                value: [3.0, -5.0, -1.0],
            },
            SupersaturationField::Constant { value: 0.0 },
            &geometry,
        );
        let k = kernels(MassFunction::Zero);
        let tr = Tracer::new(&f, &k, geometry);
        let path = tr.trace_forward(State::new(0.0, 1.0, 1.0), None).unwrap();
        for p in &path.points {
            assert!(p.state.x[0] >= 0.0 && p.state.x[0] < 1.0);
            assert!(p.state.x[1] >= 0.0 && p.state.x[1] < 2.0);
        }
        let end = path.end().state;
        assert_abs_diff_eq!(end.x[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(end.x[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn upward_velocity_is_a_step_failure() {
        let f = FieldSet::new(
            1.0,
            VelocityField::Constant { value: [0.0, 0.0, 1.0] },
            SupersaturationField::Constant { value: 0.0 },
            &Geometry::Columnar,
        );
        let k = kernels(MassFunction::Zero);
        let tr = Tracer::new(&f, &k, Geometry::Columnar);
        assert!(matches!(
            tr.trace_forward(State::new(0.0, 0.5, 1.0), None),
            Err(Error::StepFailure { .. })
        ));
        let nan = FieldSet::new(
            1.0,
            VelocityField::Constant {
                value: [0.0, 0.0, f64::NAN],
            },
            SupersaturationField::Constant { value: 0.0 },
            &Geometry::Columnar,
        );
        let tr = Tracer::new(&nan, &k, Geometry::Columnar);
        assert!(tr.trace_backward(1.0, [0.0, 0.0, 0.5], 1.0).is_err());
    }
}
