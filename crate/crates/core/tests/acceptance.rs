//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! standard error (written directly so it shows without `--nocapture`) and the
//! test fails if any criterion does.

use std::io::Write;
use std::time::Instant;

use coop_ead::clustering::{accel_distance, earliest_arrival};
use coop_ead::ead_profile::{arrival_bounds, plan_profile_to_target, profile_for_arrival, MotionLimits, ScenarioKind, TrigProfile};
use coop_ead::engine::{run_ego_baseline, run_simulation, Policy, SimulationOutput};
use coop_ead::metrics::{build_report, compare_reports, EnergyModel};
use coop_ead::platoon_control::{simulate_pair, PairSetup};
use coop_ead::scenario::{paper_tables, GreenWindow};
use coop_ead::sequencing::{brute_force_sequence, spt_sequence, Candidate, SequencingParams};
use coop_ead::{Scenario, VehicleId};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn ids(v: &[VehicleId]) -> Vec<u32> {
    v.iter().map(|i| i.0).collect()
}

fn first_window(out: &SimulationOutput) -> GreenWindow {
    out.windows[0]
}

fn in_window(t: f64, w: &GreenWindow) -> bool {
    t >= w.start_s - 1e-3 && t <= w.end_s + 1e-3
}

fn limits(s: &Scenario) -> MotionLimits {
    let v = &s.fleet[0];
    MotionLimits {
        a_max: v.a_max,
        d_max: v.d_max,
        jerk_max: v.jerk_max,
    }
}

fn ego_sequences() -> Outcome {
    let s = paper_tables();
    let start = Instant::now();
    let out = run_ego_baseline(&s).expect("ego run");
    let elapsed = start.elapsed().as_secs_f64();
    let got: Vec<[Vec<u32>; 2]> = out
        .plan
        .clusters
        .iter()
        .map(|c| [ids(&c.lane_sequence(0)), ids(&c.lane_sequence(1))])
        .collect();
    let want = vec![
        [vec![1, 2, 3, 6, 8], vec![4, 5, 7, 10, 11]],
        [vec![9, 13, 15, 16], vec![12, 14]],
    ];
    outcome(got == want && elapsed < 1.0, format!("clusters {got:?}, {elapsed:.2} s"))
}

fn coop_sequences() -> Outcome {
    let s = paper_tables();
    let out = run_simulation(&s, Policy::Coop).expect("coop run");
    let c = &out.plan.clusters;
    let lane_a = vec![1, 2, 3, 6, 10, 11, 12, 14];
    let lane_b = vec![4, 5, 7, 8, 9, 13, 15];
    let swap = |v: &[u32]| -> Vec<u32> {
        v.iter()
            .map(|&i| match i {
                3 => 5,
                5 => 3,
                other => other,
            })
            .collect()
    };
    let got_a = ids(&c[0].lane_sequence(0));
    let got_b = ids(&c[0].lane_sequence(1));
    let first_ok = (got_a == lane_a && got_b == lane_b) || (got_a == swap(&lane_a) && got_b == swap(&lane_b));
    let second_ok = c.len() == 2 && ids(&c[1].member_ids()) == vec![16];
    let swapped = got_a.get(2) == Some(&5);
    outcome(
        first_ok && second_ok,
        format!(
            "lane a {got_a:?}, lane b {got_b:?}{}, objective {:.1} s",
            if swapped { " (3/5 swapped)" } else { "" },
            c[0].objective
        ),
    )
}

fn throughput() -> Outcome {
    let s = paper_tables();
    let start = Instant::now();
    let coop = run_simulation(&s, Policy::Coop).expect("coop run");
    let ego = run_simulation(&s, Policy::Ego).expect("ego run");
    let elapsed = start.elapsed().as_secs_f64();
    let model = EnergyModel::default();
    let rc = build_report(&coop.log, &coop.windows, &model);
    let re = build_report(&ego.log, &ego.windows, &model);
    let delta = compare_reports(&re, &rc).expect("same fleet").throughput_window_1_pct;
    let pass = rc.throughput.window_1 == 15 && re.throughput.window_1 == 10 && delta == Some(50.0) && elapsed < 5.0;
    outcome(
        pass,
        format!(
            "coop {} vs ego {} in the first window ({:+.0}%), both runs {elapsed:.2} s",
            rc.throughput.window_1,
            re.throughput.window_1,
            delta.unwrap_or(f64::NAN)
        ),
    )
}

fn vehicle_16() -> Outcome {
    let s = paper_tables();
    let v = s.vehicle(VehicleId(16)).expect("vehicle 16");
    let t_e = earliest_arrival(v.id, v.initial_speed, v.initial_distance, s.speed_limit(), v.a_max, 0.0).arrival_time;
    let out = run_simulation(&s, Policy::Coop).expect("coop run");
    let w1 = first_window(&out);
    let w2 = out.windows[1];
    let t = out.log.crossing_time(VehicleId(16)).unwrap_or(f64::NAN);
    outcome(
        t_e > w1.end_s && in_window(t, &w2) && (t_e - 39.3).abs() < 0.1,
        format!("earliest arrival {t_e:.2} s, crosses at {t:.2} s in [{}, {}]", w2.start_s, w2.end_s),
    )
}

/// Lowest speed a vehicle reaches before it crosses the stop bar.
fn min_speed_before_crossing(out: &SimulationOutput, id: VehicleId) -> f64 {
    let t_cross = out.log.crossing_time(id).unwrap_or(f64::INFINITY);
    out.log
        .vehicle_rows(id)
        .iter()
        .filter(|r| r.t <= t_cross)
        .map(|r| r.v)
        .fold(f64::INFINITY, f64::min)
}

fn energy_direction() -> Outcome {
    const STOPPED: f64 = 0.1;
    let s = paper_tables();
    let model = EnergyModel::default();
    let coop = run_simulation(&s, Policy::Coop).expect("coop run");
    let ego = run_simulation(&s, Policy::Ego).expect("ego run");
    let rc = build_report(&coop.log, &coop.windows, &model);
    let re = build_report(&ego.log, &ego.windows, &model);

    let cluster_1 = coop.plan.clusters[0].member_ids();
    let coop_stops = cluster_1
        .iter()
        .filter(|&&id| min_speed_before_crossing(&coop, id) < STOPPED)
        .count();
    let w1 = first_window(&ego);
    let ego_stops = ego.log.vehicle_ids().into_iter().filter(|&id| min_speed_before_crossing(&ego, id) < STOPPED).count();
    let ego_late = ego
        .log
        .crossings
        .values()
        .filter(|&&t| t > w1.end_s + 1e-3)
        .count();
    let (ec, ee) = (rc.totals.energy_per_vehicle_kj, re.totals.energy_per_vehicle_kj);
    outcome(
        ec < ee && coop_stops == 0 && (ego_stops >= 1 || ego_late >= 1),
        format!(
            "per vehicle coop {ec:.1} kJ vs ego {ee:.1} kJ ({:.2}% lower); coop cluster-1 stops {coop_stops}; ego stops {ego_stops}, later-window crossings {ego_late}",
            100.0 * (ee - ec) / ee
        ),
    )
}

/// Velocity-Verlet style re-integration of the profile's acceleration. Returns
/// the distance covered and the largest forward and braking accelerations seen.
fn reintegrate(p: &TrigProfile, t_end: f64, dt: f64) -> (f64, f64, f64) {
    let (mut x, mut v) = (0.0, p.v_c);
    let mut a = p.eval(0.0).accel;
    let (mut peak_up, mut peak_down) = (a.max(0.0), (-a).max(0.0));
    let steps = (t_end / dt).ceil() as usize;
    for k in 0..steps {
        let t = k as f64 * dt;
        let h = dt.min(t_end - t);
        let a_next = p.eval(t + h).accel;
        x += v * h + h * h * (2.0 * a + a_next) / 6.0;
        v += 0.5 * h * (a + a_next);
        a = a_next;
        peak_up = peak_up.max(a);
        peak_down = peak_down.max(-a);
    }
    (x, peak_up, peak_down)
}

fn profile_suite() -> Outcome {
    let s = paper_tables();
    let lim = limits(&s);
    let (v_lim, v_coast) = (s.speed_limit(), s.policy.coast_speed);
    let start = Instant::now();

    let mut profiles: Vec<TrigProfile> = Vec::new();
    for v_c in [6.0, 8.0, 10.0, 12.0, 14.0, 16.0] {
        for d_0 in [150.0, 200.0, 250.0, 300.0, 350.0, 400.0, 450.0] {
            let b = arrival_bounds(v_c, d_0, v_lim, v_coast, &lim).expect("valid bounds");
            let mut targets = vec![b.t_cr];
            for f in [0.2, 0.5, 0.8] {
                targets.push(b.t_e + f * (b.t_cr - b.t_e));
                targets.push(b.t_cr + f * (b.t_l - b.t_cr));
            }
            for target in targets {
                if let Ok(p) = profile_for_arrival(v_c, d_0, target, v_lim, &lim) {
                    profiles.push(p);
                }
            }
            let stop_from = b.t_l.max(2.0 * d_0 / v_c);
            for extra in [1.0, 6.0] {
                if let Ok(p) = plan_profile_to_target(v_c, d_0, stop_from + extra, stop_from + extra, v_lim, v_coast, &lim) {
                    profiles.push(p);
                }
            }
        }
    }

    let mut kinds = [0usize; 4];
    let mut failures: Vec<String> = Vec::new();
    let mut worst_closed: f64 = 0.0;
    let mut worst_numeric: f64 = 0.0;
    for p in &profiles {
        let kind = match p.scenario {
            ScenarioKind::SlowNoStop => 0,
            ScenarioKind::SpeedUp => 1,
            ScenarioKind::Cruise => 2,
            ScenarioKind::FullStop => 3,
        };
        kinds[kind] += 1;
        let mut fail = |what: String| failures.push(format!("{:?} v_c={} d_0={}: {what}", p.scenario, p.v_c, p.d_0));
        let bp = p.breakpoints;
        if p.scenario != ScenarioKind::Cruise {
            for t in [bp.t_join, bp.t_1, bp.t_depart, bp.t_2, bp.t_3] {
                let eps = 1e-11 * t.max(1.0);
                let jump = (p.eval(t + eps).accel - p.eval(t - eps).accel).abs();
                if jump >= 1e-9 {
                    fail(format!("acceleration jump {jump:e} at {t}"));
                }
            }
        }
        let t_cross = p.crossing_time();
        let closed = (p.eval(t_cross).position - p.d_0).abs();
        worst_closed = worst_closed.max(closed);
        if closed > 1e-6 {
            fail(format!("closed-form position off by {closed:e}"));
        }
        let (x, up, down) = reintegrate(p, t_cross, 1e-4);
        worst_numeric = worst_numeric.max((x - p.d_0).abs());
        if (x - p.d_0).abs() > 1e-3 {
            fail(format!("re-integrated position off by {:e}", x - p.d_0));
        }
        let end_speed = p.eval(bp.t_3).speed;
        if (end_speed - p.v_c).abs() > 1e-9 {
            fail(format!("speed {end_speed} at the end of departure"));
        }
        if p.scenario == ScenarioKind::FullStop && p.eval(p.t_arr).speed.abs() > 1e-9 {
            fail(format!("speed {} at the stop", p.eval(p.t_arr).speed));
        }
        let (_, up_after, down_after) = reintegrate(p, bp.t_3 + 1.0, 1e-3);
        if up.max(up_after) > lim.a_max + 1e-9 || down.max(down_after) > lim.d_max + 1e-9 {
            fail(format!("acceleration peaks {:.3}/{:.3} beyond bounds", up.max(up_after), down.max(down_after)));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = profiles.len() >= 200 && kinds.iter().all(|&k| k > 0) && failures.is_empty() && elapsed < 10.0;
    let mut detail = format!(
        "{} profiles (slow {}, speed-up {}, cruise {}, full stop {}), worst position error {worst_closed:.1e} m closed form, {worst_numeric:.1e} m re-integrated, {elapsed:.2} s",
        profiles.len(),
        kinds[0],
        kinds[1],
        kinds[2],
        kinds[3]
    );
    if let Some(first) = failures.first() {
        detail.push_str(&format!("; {} violations, first: {first}", failures.len()));
    }
    outcome(pass, detail)
}

/// Seeded random sequencing instances in the shape the clustering stage
/// produces: queued vehicles per lane with earliest arrivals from their speeds.
fn random_instances(count: usize, max_lanes: usize, seed: u64) -> Vec<(usize, Vec<Candidate>)> {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..count)
        .map(|_| {
            let lanes = 1 + (next() * max_lanes as f64) as usize % max_lanes;
            let n = 1 + (next() * 8.0) as usize % 8;
            let mut head: Vec<f64> = (0..lanes).map(|_| 250.0 + 50.0 * next()).collect();
            let cands = (0..n)
                .map(|i| {
                    let lane = (next() * lanes as f64) as usize % lanes;
                    head[lane] += 8.0 + 52.0 * next();
                    let v = 10.0 + 7.88 * next();
                    let e = earliest_arrival(VehicleId(i as u32 + 1), v, head[lane], 17.88, 3.5, 0.0);
                    Candidate {
                        vehicle_id: VehicleId(i as u32 + 1),
                        lane,
                        distance: head[lane],
                        earliest: e.arrival_time,
                    }
                })
                .collect();
            (lanes, cands)
        })
        .collect()
}

/// Returns (instances compared, mismatches, first mismatch description).
fn oracle_mismatches(instances: &[(usize, Vec<Candidate>)]) -> (usize, usize, Option<String>) {
    let window = GreenWindow::new(27.0, 35.0);
    let mut mismatches = 0;
    let mut first = None;
    for (lanes, cands) in instances {
        let params = SequencingParams {
            lane_count: *lanes,
            t_min_h: 1.0,
            d_min_h: 10.0,
            allow_lane_change: true,
        };
        let spt = spt_sequence(cands, window, &params).expect("spt");
        let best = brute_force_sequence(cands, window, &params).expect("brute force");
        if (spt.objective - best.objective).abs() > 1e-9 {
            mismatches += 1;
            first.get_or_insert_with(|| {
                format!(
                    "{} vehicles on {lanes} lanes: spt {:.3} s vs optimum {:.3} s",
                    cands.len(),
                    spt.objective,
                    best.objective
                )
            });
        }
    }
    (instances.len(), mismatches, first)
}

fn scheduling_oracle() -> Outcome {
    let start = Instant::now();
    let (n, bad, first) = oracle_mismatches(&random_instances(1000, 3, 0x5eed_2024));
    let elapsed = start.elapsed().as_secs_f64();
    let mut detail = format!("{bad} of {n} instances (N <= 8, J <= 3) differ, {elapsed:.2} s");
    if let Some(f) = first {
        detail.push_str(&format!("; first: {f}"));
    }
    outcome(bad == 0 && elapsed < 30.0, detail)
}

/// Time to cover `d_0` accelerating at `a_max` from `v_i` up to `v_lim`,
/// integrated on a fine step with exact constant-acceleration updates.
fn integrated_arrival(v_i: f64, d_0: f64, v_lim: f64, a_max: f64, dt: f64) -> f64 {
    let (mut t, mut x, mut v) = (0.0, 0.0, v_i);
    loop {
        let a = if v < v_lim { a_max } else { 0.0 };
        let h = if a > 0.0 { dt.min((v_lim - v) / a) } else { dt };
        let h = if h <= 0.0 { dt } else { h };
        let x_next = x + v * h + 0.5 * a * h * h;
        if x_next >= d_0 {
            // solve the last partial step exactly
            let rem = d_0 - x;
            let dt_last = if a > 0.0 { (-v + (v * v + 2.0 * a * rem).sqrt()) / a } else { rem / v };
            return t + dt_last;
        }
        x = x_next;
        v = (v + a * h).min(v_lim);
        t += h;
    }
}

fn earliest_arrival_formulas() -> Outcome {
    let (v_lim, a_max) = (17.88, 3.5);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for i in 0..25 {
        let v_i = 1.0 + (v_lim - 1.0) * i as f64 / 24.0;
        for j in 0..40 {
            let d_0 = 5.0 + 495.0 * j as f64 / 39.0;
            let t = earliest_arrival(VehicleId(1), v_i, d_0, v_lim, a_max, 0.0).time_to_arrival;
            worst = worst.max((t - integrated_arrival(v_i, d_0, v_lim, a_max, 1e-3)).abs());
            points += 1;
        }
    }
    let mut seam: f64 = 0.0;
    for v_i in [2.0, 8.0, 13.41, 17.0] {
        let d_acc = accel_distance(v_i, v_lim, a_max);
        let below = earliest_arrival(VehicleId(1), v_i, d_acc * (1.0 - 1e-12), v_lim, a_max, 0.0).time_to_arrival;
        let above = earliest_arrival(VehicleId(1), v_i, d_acc, v_lim, a_max, 0.0).time_to_arrival;
        seam = seam.max((below - above).abs());
    }
    outcome(
        points >= 1000 && worst < 1e-3 && seam < 1e-9,
        format!("{points} grid points, worst deviation {worst:.1e} s, branch seam gap {seam:.1e} s"),
    )
}

fn consensus() -> Outcome {
    let s = paper_tables();
    let p = &s.policy;
    let lead = &s.fleet[0];
    let base = PairSetup {
        leader_speed: 14.0,
        gap_error: 0.0,
        speed_error: 0.0,
        headway: 2.0,
        lengths: lead.l_front + lead.l_rear,
        d_safe: p.d_safe,
        braking_factor: lead.braking_factor,
        tau: 0.06,
        gamma: p.gamma,
        a_max: lead.a_max,
        d_max: lead.d_max,
        v_lim: s.speed_limit(),
        dt: 0.1,
        duration: 30.0,
    };
    let box_check = |headway: f64, gaps: &[f64]| -> (usize, usize, f64) {
        let (mut runs, mut bad, mut min_gap) = (0, 0, f64::INFINITY);
        // leader speeds at which even the -20 m corner starts with a legal gap
        for leader_speed in [13.5, 15.0, 17.0] {
            for &gap_error in gaps {
                for speed_error in [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0] {
                    let trace = simulate_pair(&PairSetup {
                        leader_speed,
                        gap_error,
                        speed_error,
                        headway,
                        ..base
                    });
                    let last = trace.last().expect("samples");
                    let lowest = trace.iter().map(|s| s.bumper_gap).fold(f64::INFINITY, f64::min);
                    min_gap = min_gap.min(lowest);
                    runs += 1;
                    if !(last.gap_error.abs() < 0.1 && last.speed_error.abs() < 0.05 && lowest >= p.d_safe) {
                        bad += 1;
                    }
                }
            }
        }
        (runs, bad, min_gap)
    };
    let full: Vec<f64> = (0..=8).map(|k| -20.0 + 5.0 * k as f64).collect();
    let (runs_2, bad_2, gap_2) = box_check(2.0, &full);
    let sub: Vec<f64> = (0..=5).map(|k| -5.0 + 5.0 * k as f64).collect();
    let (runs_1, bad_1, gap_1) = box_check(1.0, &sub);

    let out = run_simulation(&s, Policy::Coop).expect("coop run");
    let cluster = &out.plan.clusters[0];
    let mut min_headway = f64::INFINITY;
    for lane in cluster.lanes() {
        let times: Vec<f64> = cluster
            .lane_sequence(lane)
            .iter()
            .map(|&id| out.log.crossing_time(id).unwrap_or(f64::NAN))
            .collect();
        for w in times.windows(2) {
            min_headway = min_headway.min(w[1] - w[0]);
        }
    }
    outcome(
        bad_2 == 0 && bad_1 == 0 && min_headway >= 0.95,
        format!(
            "t_h 2 s full box {}/{runs_2} ok (min gap {gap_2:.2} m), t_h 1 s sub-box {}/{runs_1} ok (min gap {gap_1:.2} m); cluster-1 same-lane headway min {min_headway:.3} s",
            runs_2 - bad_2,
            runs_1 - bad_1
        ),
    )
}

fn determinism() -> Outcome {
    let s = paper_tables();
    let mut same = true;
    let mut bytes = 0;
    for policy in [Policy::Coop, Policy::Ego] {
        let a = run_simulation(&s, policy).expect("run").log.to_csv();
        let b = run_simulation(&s, policy).expect("run").log.to_csv();
        same &= a.as_bytes() == b.as_bytes();
        bytes += a.len();
    }
    outcome(same, format!("repeated runs of both policies identical ({bytes} bytes of CSV)"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("ego clusters and lane sequences", ego_sequences),
        ("coop lane assignment and slot order", coop_sequences),
        ("first-window throughput gain", throughput),
        ("vehicle 16 served in the second window", vehicle_16),
        ("energy direction and stops", energy_direction),
        ("speed profile invariants", profile_suite),
        ("list scheduling matches exhaustive search", scheduling_oracle),
        ("earliest-arrival closed forms", earliest_arrival_formulas),
        ("consensus convergence and headways", consensus),
        ("trajectory determinism", determinism),
    ];
    let mut stderr = std::io::stderr();
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        writeln!(stderr, "criterion {:>2} {tag}: {name}: {}", k + 1, o.detail).unwrap();
        if !o.pass {
            failed.push(k + 1);
        }
    }
    // informational: the two-lane restriction of the scheduling check
    let (n, bad, _) = oracle_mismatches(&random_instances(1000, 2, 0x5eed_2024));
    writeln!(stderr, "info: list scheduling vs exhaustive search with J <= 2: {bad} of {n} instances differ").unwrap();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
