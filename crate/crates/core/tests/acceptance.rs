//! Acceptance suite for the desk scenario. Each test prints one
//! `criterion N: PASS|FAIL` line with the measured quantities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use stratocoag::bounds::check_conditions;
use stratocoag::characteristics::{Clock, EntryKind, State, Tracer};
use stratocoag::config::{desk_config, desk_scenario, parse_config, Prepared, RunConfig};
use stratocoag::oracle::compare_suite;
use stratocoag::solver::{picard_solve, DensityField, Inflow, Mode, PicardLog, Problem};
use stratocoag::steady::relaxation_study;

const TOL_FIX: f64 = 1e-10;

fn report(n: usize, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn solve(config: &RunConfig) -> (DensityField, PicardLog, Prepared, Duration) {
    let started = Instant::now();
    let prepared = Prepared::new(config).unwrap();
    let problem = Problem {
        kernels: &config.kernels,
        fields: &prepared.fields,
        geometry: &config.geometry,
        inflow: Inflow::Transient(&prepared.inflow),
    };
    let (field, log) = picard_solve(&problem, prepared.grid.clone(), &config.solver).unwrap();
    (field, log, prepared, started.elapsed())
}

fn desk_solve() -> &'static (DensityField, PicardLog, Prepared, Duration) {
    static SOLVE: OnceLock<(DensityField, PicardLog, Prepared, Duration)> = OnceLock::new();
    SOLVE.get_or_init(|| solve(&desk_config()))
}

#[test]
fn criterion_1_smallness_gate() {
    let started = Instant::now();
    let prepared = Prepared::new(&desk_config()).unwrap();
    let failures = check_conditions(&prepared.report);
    let elapsed = started.elapsed();
    let r = &prepared.report;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let halves = rel(r.data_threshold, 0.5 * r.sup_bound) <= 1e-12
        && rel(r.data_threshold_star, 0.5 * r.sup_bound_star) <= 1e-12;
    let pass = failures.is_empty() && r.flags.all() && halves && elapsed < Duration::from_secs(1);
    report(
        1,
        pass,
        format!(
            "flags={:?} threshold={:.6} bound={:.6} time={:.3}s",
            r.flags,
            r.data_threshold,
            r.sup_bound,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_sup_bound() {
    let (field, log, prepared, elapsed) = desk_solve();
    let sup = field.sup();
    let bound = prepared.report.sup_bound;
    let pass = log.final_difference() < TOL_FIX && sup <= bound * 1.01 && elapsed.as_secs_f64() < 60.0;
    report(
        2,
        pass,
        format!(
            "sup={sup:.6} bound={bound:.6} iterations={} last_diff={:.3e} time={:.1}s",
            log.iterations,
            log.final_difference(),
            elapsed.as_secs_f64()
        ),
    );
}

fn random_config(rng: &mut ChaCha8Rng) -> Value {
    let hat = |h: f64| json!({ "kind": "hat", "lo": 1.0, "peak": 1.5, "hi": 2.0, "height": h });
    json!({
        "grid": {
            "x3_nodes": rng.gen_range(9..=17),
            "mass_nodes": 33,
            "horizon": 1.0,
            "mass_extent": 1.5,
            "lattice_points": 16
        },
        "kernels": {
            "m_a": 1.0,
            "m_A": 2.0,
            "beta": { "kind": "truncated_constant", "b": rng.gen_range(0.0..0.3) },
            "g0": hat(rng.gen_range(0.0..1.0)),
            "g1": { "kind": "constant", "value": rng.gen_range(0.0..0.5) },
            "eta": hat(rng.gen_range(0.0..0.2)),
            "n": hat(rng.gen_range(0.0..1.0)),
            "n1": rng.gen_range(0.2..1.0)
        },
        "fields": {
            "a0": 1.0,
            "u": {
                "kind": "falling",
                "base": rng.gen_range(1.0..1.5),
                "mass_coeff": rng.gen_range(0.0..1.0),
                "mass_scale": 1.0,
                "stretch": rng.gen_range(0.0..0.2)
            },
            "q": { "kind": "profile", "bottom": rng.gen_range(-0.2..0.2), "top": rng.gen_range(-0.2..0.3) }
        },
        "data": {
            "sigma0": { "mass": hat(rng.gen_range(0.0..0.08)) },
            "sigma1": {
                "mass": hat(rng.gen_range(0.0..0.08)),
                "modulation": { "kind": "exponential", "base": 1.0, "amplitude": rng.gen_range(-0.3..0.3), "rate": 1.0 }
            }
        }
    })
}

#[test]
fn criterion_3_positivity_and_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut accepted = 0;
    let mut worst_neg = 0.0f64;
    let mut worst_above = 0.0f64;
    let mut clamps = 0;
    let mut attempts = 0;
    while accepted < 20 && attempts < 400 {
        attempts += 1;
        let Ok(config) = parse_config(&random_config(&mut rng).to_string()) else {
            continue;
        };
        let prepared = Prepared::new(&config).unwrap();
        if !check_conditions(&prepared.report).is_empty() {
            continue;
        }
        let (field, log, prepared, _) = solve(&config);
        worst_neg = worst_neg.min(field.min());
        worst_above = worst_above.max(field.sup_above(prepared.mass.m_b()));
        clamps += log.clamp_count;
        accepted += 1;
    }
    let pass = accepted == 20 && worst_neg >= -1e-12 && worst_above <= 1e-12 && clamps == 0;
    report(
        3,
        pass,
        format!("configs={accepted}/{attempts} min={worst_neg:e} sup_above_m_B={worst_above:e} clamps={clamps}"),
    );
}

/// Shared random traces for criteria 4 and 5.
fn random_points(seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1000)
        .map(|_| {
            (
                rng.gen_range(0.0..2.0),
                rng.gen_range(1e-3..1.0 - 1e-3),
                rng.gen_range(0.05..2.0),
            )
        })
        .collect()
}

#[test]
fn criterion_4_crossing_time_law() {
    let config = desk_config();
    let fields = config.field_set();
    let a0 = config.fields.a0;
    let tracer = Tracer::new(&fields, &config.kernels, config.geometry).with_clock(Clock::Running);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut forward_ok = 0;
    let mut late = 0;
    let mut late_top = 0;
    for (t, x3, m) in random_points(4) {
        let path = tracer.trace_forward(State::new(t, x3, m), None).unwrap();
        let s1 = path.exit_s.expect("forward traces leave through x3 = 0");
        worst_excess = worst_excess.max(s1 - x3 / a0);
        if path.crossing_bound_holds(a0, 1e-8) {
            forward_ok += 1;
        }
        let t_late = 1.0 / a0 + t / 2.0 + 1e-6;
        let entry = tracer.trace_backward(t_late, [0.0, 0.0, x3], m).unwrap();
        late += 1;
        if entry.kind == EntryKind::TopBoundary {
            late_top += 1;
        }
    }
    let pass = forward_ok == 1000 && late_top == late;
    report(
        4,
        pass,
        format!("forward_ok={forward_ok}/1000 max(s1 - x3/A0)={worst_excess:.3e} late_top_entries={late_top}/{late}"),
    );
}

#[test]
fn criterion_5_mass_growth_bound() {
    let config = desk_config();
    let prepared = Prepared::new(&config).unwrap();
    let h = prepared.report.norms.h_gl;
    let tracer = Tracer::new(&prepared.fields, &config.kernels, config.geometry).with_clock(Clock::Running);
    let mut worst = f64::NEG_INFINITY;
    let mut ok = 0;
    let mut checked = 0;
    for (t, x3, m) in random_points(5) {
        let forward = tracer.trace_forward(State::new(t, x3, m), None).unwrap();
        let (backward, _) = tracer.backward_path(State::new(t, x3, m)).unwrap();
        let mut path_ok = forward.mass_bound_holds(h, 1e-8);
        for p in &forward.points {
            worst = worst.max(p.state.m / (m * (p.s * h).exp()) - 1.0);
        }
        // backward: the path point is the starting mass of a forward trace that reaches m after s
        for p in &backward {
            let ratio = m / (p.state.m * (p.s * h).exp()) - 1.0;
            worst = worst.max(ratio);
            path_ok &= ratio <= 1e-8;
        }
        checked += 1;
        if path_ok {
            ok += 1;
        }
    }
    report(
        5,
        ok == checked,
        format!("paths_ok={ok}/{checked} max relative excess={worst:.3e} h_gl_sup={h:.6}"),
    );
}

#[test]
fn criterion_6_oracle_equivalence() {
    let started = Instant::now();
    let rows = compare_suite().unwrap();
    let elapsed = started.elapsed();
    let order = |name: &str| {
        rows.iter()
            .find(|r| r.scenario == name)
            .and_then(|r| r.order)
            .unwrap_or(f64::NAN)
    };
    let (adv, dec) = (order("pure_advection"), order("pure_decay"));
    let (gain, loss) = (order("coag_gain_closed_form"), order("coag_loss_closed_form"));
    let pass = adv >= 0.9 && dec >= 0.9 && gain >= 1.9 && loss >= 1.9 && elapsed.as_secs_f64() < 120.0;
    report(
        6,
        pass,
        format!(
            "orders: advection={adv:.3} decay={dec:.3} gain={gain:.3} loss={loss:.3} time={:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_contraction() {
    let (global, log, _, _) = desk_solve();
    let d = log.differences();
    // ratios from the second iteration on; differences at round-off level carry no rate
    let ratios: Vec<f64> = d.windows(2).filter(|w| w[1] > 1e-13).map(|w| w[1] / w[0]).collect();
    let worst_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let mut config = desk_config();
    config.solver.mode = Mode::Strip;
    let (strip, strip_log, _, _) = solve(&config);
    let gap = global.max_difference(&strip);
    let pass = worst_ratio < 0.9 && gap <= 10.0 * TOL_FIX;
    report(
        7,
        pass,
        format!(
            "max ratio={worst_ratio:.3e} differences={d:?} global-strip={gap:.3e} strip_iterations={}",
            strip_log.iterations
        ),
    );
}

fn relax_config(perturbed: bool) -> RunConfig {
    let mut doc = desk_scenario();
    doc["grid"] = json!({ "x3_nodes": 33, "mass_nodes": 65 });
    doc["relax"] = json!({ "probe_times": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0], "horizon": 4.0 });
    if perturbed {
        doc["fields"]["u"]["pulse"] = json!(0.1);
        doc["fields"]["u"]["pulse_decay"] = json!(1.0);
        doc["fields"]["q"]["pulse"] = json!(0.05);
        doc["fields"]["q"]["pulse_decay"] = json!(1.0);
    }
    parse_config(&doc.to_string()).unwrap()
}

#[test]
fn criterion_8_relaxation() {
    let started = Instant::now();
    let config = relax_config(false);
    let dt = Prepared::new(&config).unwrap().grid.time.step;
    let exact = relaxation_study(&config).unwrap();
    let allowed = 10.0 * TOL_FIX + exact.interpolation_error;
    let late: Vec<f64> = exact
        .points
        .iter()
        .filter(|p| p.t_node >= 1.0 / config.fields.a0 + dt - 1e-12)
        .map(|p| p.distance)
        .collect();
    let worst_late = late.iter().copied().fold(0.0, f64::max);

    let perturbed = relaxation_study(&relax_config(true)).unwrap();
    let at = |t: f64| {
        perturbed
            .points
            .iter()
            .find(|p| (p.t - t).abs() < 1e-12)
            .map(|p| p.distance)
            .unwrap()
    };
    let (d15, d4) = (at(1.5), at(4.0));
    let elapsed = started.elapsed();
    let pass = !late.is_empty() && worst_late <= allowed && d4 < d15 && elapsed.as_secs_f64() < 90.0;
    report(
        8,
        pass,
        format!(
            "stationary data: max late distance={worst_late:.3e} <= {allowed:.3e}; perturbed: d(1.5)={d15:.3e} d(4)={d4:.3e}; time={:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = desk_scenario();
    doc["grid"] = json!({ "x3_nodes": 17, "mass_nodes": 33 });
    let cfg = dir.path().join("reduced.json");
    std::fs::write(&cfg, doc.to_string()).unwrap();
    let mut outputs = Vec::new();
    for threads in [1, 3] {
        let out = dir.path().join(format!("t{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_stratocoag"))
            .arg("--config")
            .arg(&cfg)
            .arg("--output")
            .arg(&out)
            .arg("--threads")
            .arg(threads.to_string())
            .arg("solve")
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        outputs.push((
            std::fs::read(out.join("field.csv")).unwrap(),
            std::fs::read(out.join("solve.json")).unwrap(),
        ));
    }
    let same_csv = outputs[0].0 == outputs[1].0;
    let same_json = outputs[0].1 == outputs[1].1;
    report(
        9,
        same_csv && same_json && !outputs[0].0.is_empty(),
        format!(
            "field.csv identical={same_csv} ({} bytes), solve.json identical={same_json}",
            outputs[0].0.len()
        ),
    );
}
