//! Property tests for the invariants of each module.

use proptest::prelude::*;
use stratocoag::bounds::{data_threshold_formula, sup_bound_formula};
use stratocoag::characteristics::{Clock, EntryKind, State, Tracer};
use stratocoag::collision::{coag_gain, coag_loss, CollisionTables, MassGrid};
use stratocoag::config::{desk_config, desk_scenario, parse_config};
use stratocoag::model::{
    CoagulationKernel, FieldSet, Geometry, KernelSet, MassFunction, SupersaturationField, VelocityField,
};
use stratocoag::oracle::{advection_exact, brute_total_gain, decay_exact};
use stratocoag::solver::{
    linear_step, Axis, DensityField, Grid, Inflow, InflowData, InflowProfile, Modulation, Problem,
};

fn kernels(b: f64) -> KernelSet {
    KernelSet {
        m_lower: 1.0,
        m_upper: 2.0,
        beta: CoagulationKernel::TruncatedConstant { b },
        g0: MassFunction::hat(1.0, 1.5, 2.0, 1.0),
        g1: MassFunction::Zero,
        eta: MassFunction::hat(1.0, 1.5, 2.0, 0.1),
        n: MassFunction::hat(1.0, 1.5, 2.0, 1.0),
        n1: 1.0,
    }
}

fn falling(base: f64, coeff: f64, stretch: f64) -> VelocityField {
    VelocityField::Falling {
        base,
        mass_coeff: coeff,
        mass_scale: 1.0,
        stretch,
        horizontal: [0.0, 0.0],
        swirl: 0.0,
        pulse: 0.0,
        pulse_decay: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_is_symmetric_and_truncated(b in 0.0..1.0f64, m1 in 0.0..4.0f64, m2 in 0.0..4.0f64) {
        let k = kernels(b);
        prop_assert_eq!(k.beta(m1, m2), k.beta(m2, m1));
        if m1 + m2 >= 2.0 {
            prop_assert_eq!(k.beta(m1, m2), 0.0);
        }
    }

    #[test]
    fn hat_stays_in_range(lo in 0.0..1.0f64, w1 in 0.01..1.0f64, w2 in 0.01..1.0f64, h in 0.0..2.0f64, m in 0.0..4.0f64) {
        let f = MassFunction::hat(lo, lo + w1, lo + w1 + w2, h);
        let v = f.value(m);
        prop_assert!((0.0..=h).contains(&v));
        prop_assert!(v <= f.sup_abs() + 1e-15);
    }

    #[test]
    fn threshold_is_half_the_bound(i in 1e-3..10.0f64, j in 1e-6..10.0f64, k in 0.0..10.0f64) {
        let bound = sup_bound_formula(i, j, k);
        let threshold = data_threshold_formula(i, j, k);
        prop_assert!(bound > 0.0 && bound.is_finite());
        prop_assert!((threshold - 0.5 * bound).abs() <= 1e-12 * bound);
    }

    #[test]
    fn bound_is_continuous_at_small_j(i in 1e-2..5.0f64, k in 0.0..5.0f64) {
        let a = sup_bound_formula(i, 1e-13, k);
        let b = sup_bound_formula(i, 1e-9, k);
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1e-300));
    }

    #[test]
    fn collision_operators_are_nonnegative(b in 0.0..0.5f64, values in prop::collection::vec(0.0..1.0f64, 33)) {
        let k = kernels(b);
        let grid = MassGrid::new(1.0, 2.0, 2.0, 33, 1.0);
        let sigma = &values[..grid.len()];
        for i in 0..grid.len() {
            let g = coag_gain(sigma, &k, &grid, i);
            let l = coag_loss(sigma, &k, &grid, i);
            prop_assert!(g >= 0.0 && l >= 0.0);
            if grid.nodes()[i] >= 2.0 {
                prop_assert_eq!(g, 0.0);
                prop_assert_eq!(l, 0.0);
            }
        }
    }

    #[test]
    fn tables_match_direct_quadrature(b in 0.0..0.5f64, values in prop::collection::vec(0.0..1.0f64, 40)) {
        let k = kernels(b);
        let grid = MassGrid::new(1.0, 2.0, 2.3, 33, 1.2);
        let sigma = &values[..grid.len()];
        let tables = CollisionTables::new(&k, &grid);
        let mut gain = vec![0.0; grid.len()];
        let mut loss = vec![0.0; grid.len()];
        tables.columns(sigma, &mut gain, &mut loss);
        for i in 0..grid.len() {
            prop_assert!((gain[i] - coag_gain(sigma, &k, &grid, i)).abs() <= 1e-14);
            prop_assert!((loss[i] - coag_loss(sigma, &k, &grid, i)).abs() <= 1e-14);
        }
        let brute = brute_total_gain(sigma, &k, &grid);
        prop_assert!((grid.integrate(&gain) - brute).abs() <= 1e-10 * brute.abs().max(1e-300));
    }

    #[test]
    fn crossing_time_law(base in 1.0..2.0f64, coeff in 0.0..1.0f64, stretch in 0.0..0.5f64,
                         t in 0.0..2.0f64, x3 in 0.001..0.999f64, m in 0.0..2.5f64) {
        let geometry = Geometry::Columnar;
        let fields = FieldSet::new(1.0, falling(base, coeff, stretch),
            SupersaturationField::Profile { bottom: 0.1, top: 0.2, pulse: 0.0, pulse_decay: 0.0, wave: 0.0 }, &geometry);
        let k = kernels(0.1);
        let tracer = Tracer::new(&fields, &k, geometry).with_clock(Clock::Running);
        let forward = tracer.trace_forward(State::new(t, x3, m), None).unwrap();
        prop_assert!(forward.crossing_bound_holds(1.0, 1e-8));
        prop_assert!(forward.mass_bound_holds(0.02, 1e-8));
        prop_assert!(forward.points.iter().all(|p| p.state.m >= m * (1.0 - 1e-12)));
        let entry = tracer.trace_backward(t + 1.0 + 1e-6, [0.0, 0.0, x3], m).unwrap();
        prop_assert_eq!(entry.kind, EntryKind::TopBoundary);
        prop_assert!((entry.state.x[2] - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn linear_step_is_nonnegative_and_supported(height in 0.0..0.1f64, b in 0.0..0.3f64) {
        let k = kernels(b);
        let geometry = Geometry::Columnar;
        let fields = FieldSet::new(1.0, falling(1.0, 1.0, 0.0),
            SupersaturationField::Profile { bottom: 0.1, top: 0.2, pulse: 0.0, pulse_decay: 0.0, wave: 0.0 }, &geometry);
        let profile = InflowProfile { mass: MassFunction::hat(1.0, 1.5, 2.0, height), modulation: Modulation::Constant { value: 1.0 } };
        let data = InflowData { sigma0: profile.clone(), sigma1: profile };
        let problem = Problem { kernels: &k, fields: &fields, geometry: &geometry, inflow: Inflow::Transient(&data) };
        let grid = Grid {
            time: Axis::closed(0.0, 0.5, 5),
            x1: Axis::single(0.0),
            x2: Axis::single(0.0),
            x3: Axis::closed(0.0, 1.0, 9),
            mass: MassGrid::new(1.0, 2.0, 2.05, 33, 1.3),
            ds: 0.02,
        };
        let m_b = grid.mass.m_b();
        let mut prev = DensityField::zeros(grid);
        for _ in 0..3 {
            let (next, stats) = linear_step(&problem, &prev).unwrap();
            prop_assert!(next.min() >= 0.0);
            prop_assert_eq!(next.sup_above(m_b), 0.0);
            prop_assert_eq!(stats.clamps, 0);
            prev = next;
        }
    }

    #[test]
    fn decay_never_exceeds_advection(gamma in 0.0..3.0f64, t in 0.0..2.0f64, x3 in 0.0..1.0f64, speed in 0.5..3.0f64) {
        let p = InflowProfile { mass: MassFunction::Constant { value: 0.7 }, modulation: Modulation::Linear { start: 1.0, slope: 0.5 } };
        let data = InflowData { sigma0: p.clone(), sigma1: p };
        let u = [0.0, 0.0, -speed];
        let a = advection_exact(&data, u, t, x3, 1.5);
        let d = decay_exact(&data, gamma, u, t, x3, 1.5);
        prop_assert!(d <= a + 1e-15 && d >= 0.0);
    }

    #[test]
    fn evaluate_reproduces_nodes(vals in prop::collection::vec(0.0..1.0f64, 9 * 33)) {
        let grid = Grid {
            time: Axis::single(0.0),
            x1: Axis::single(0.0),
            x2: Axis::single(0.0),
            x3: Axis::closed(0.0, 1.0, 9),
            mass: MassGrid::new(1.0, 2.0, 2.0, 33, 1.0),
            ds: 0.01,
        };
        let nm = grid.mass.len();
        let mut f = DensityField::zeros(grid.clone());
        f.values.copy_from_slice(&vals[..9 * nm]);
        for i3 in 0..9 {
            for (im, &m) in grid.mass.nodes().iter().enumerate() {
                let v = f.evaluate(0.0, &[0.0, 0.0, grid.x3.node(i3)], m).unwrap();
                prop_assert!((v - f.at(0, 0, 0, i3, im)).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn resolved_config_round_trips() {
    let c = desk_config();
    let text = serde_json::to_string(&c.resolved()).unwrap();
    let again = parse_config(&text).unwrap();
    assert_eq!(again.resolved(), c.resolved());
}

#[test]
fn schema_errors_are_collected() {
    let mut doc = desk_scenario();
    doc["fields"]["u"]["base"] = serde_json::json!(0.2);
    doc["fields"]["u"]["mass_coeff"] = serde_json::json!(0.0);
    doc["solver"]["tol_fix"] = serde_json::json!(-1.0);
    let Err(stratocoag::Error::Schema(errors)) = parse_config(&doc.to_string()) else {
        panic!("expected schema errors");
    };
    assert!(errors.iter().any(|e| e.starts_with("fields.u:")), "{errors:?}");
    assert!(errors.iter().any(|e| e.starts_with("solver.tol_fix")), "{errors:?}");
}
