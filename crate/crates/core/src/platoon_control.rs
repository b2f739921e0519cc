//! Cluster formation control: who follows whom, how far behind, and the
//! delayed consensus law that gets them there. Also the inverse of the
//! longitudinal plant, for reporting actuator demands.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::scenario::{VehicleDynamics, VehicleId};
use crate::sequencing::SequencedCluster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    ClusterLeader,
    StringLeader,
    Follower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub follower: VehicleId,
    pub target: VehicleId,
    /// Adjacency weight; every stored edge is active.
    pub weight: u8,
    /// String leader tracking the cluster leader from another lane.
    pub cross_lane: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Topology {
    pub leader: VehicleId,
    pub edges: Vec<Edge>,
    pub roles: BTreeMap<VehicleId, Role>,
}

impl Topology {
    pub fn edge_of(&self, follower: VehicleId) -> Option<&Edge> {
        self.edges.iter().find(|e| e.follower == follower)
    }

    pub fn role(&self, id: VehicleId) -> Option<Role> {
        self.roles.get(&id).copied()
    }

    /// Follows target links from `id`; true when the walk ends at the leader
    /// without revisiting a vehicle.
    pub fn reaches_leader(&self, id: VehicleId) -> bool {
        let mut cur = id;
        for _ in 0..=self.roles.len() {
            if cur == self.leader {
                return true;
            }
            match self.edge_of(cur) {
                Some(e) => cur = e.target,
                None => return false,
            }
        }
        false
    }
}

/// Same-lane followers track their predecessor in the sequence; string leaders
/// of other lanes track the cluster leader directly.
pub fn build_topology(seq: &SequencedCluster) -> Topology {
    let mut roles = BTreeMap::new();
    let mut edges = Vec::new();
    for a in &seq.assignments {
        let role = if a.vehicle_id == seq.leader_id {
            Role::ClusterLeader
        } else if a.position == 1 {
            Role::StringLeader
        } else {
            Role::Follower
        };
        roles.insert(a.vehicle_id, role);
        match role {
            Role::ClusterLeader => {}
            Role::StringLeader => edges.push(Edge {
                follower: a.vehicle_id,
                target: seq.leader_id,
                weight: 1,
                cross_lane: true,
            }),
            Role::Follower => {
                let pred = seq
                    .predecessor(a.vehicle_id)
                    .expect("position > 1 has a predecessor");
                edges.push(Edge {
                    follower: a.vehicle_id,
                    target: pred.vehicle_id,
                    weight: 1,
                    cross_lane: false,
                });
            }
        }
    }
    Topology {
        leader: seq.leader_id,
        edges,
        roles,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapPolicy {
    /// Desired time gap, bumper to bumper.
    pub t_g: f64,
    pub d_safe: f64,
    pub braking_factor: f64,
    pub cross_lane: bool,
}

/// Time gap that yields headway `t_h` once `lengths = l_if + l_jr` is covered
/// at the predecessor speed, floored at zero.
pub fn time_gap_from_headway(t_h: f64, lengths: f64, pred_speed: f64) -> f64 {
    if pred_speed <= 0.0 {
        return 0.0;
    }
    (t_h - lengths / pred_speed).max(0.0)
}

/// Desired bumper gap behind a predecessor whose delayed speed is
/// `pred_speed_delayed`. Cross-lane edges ask for side-by-side alignment.
pub fn desired_gap(pred_speed_delayed: f64, policy: &GapPolicy, tau: f64) -> f64 {
    if policy.cross_lane {
        return 0.0;
    }
    policy
        .d_safe
        .max(pred_speed_delayed * (policy.t_g + tau) * policy.braking_factor)
}

/// Position and speed of one vehicle, position measured along travel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kinematics {
    pub x: f64,
    pub v: f64,
}

/// Delayed consensus acceleration toward `target_delayed`.
///
/// `spacing` is the desired distance between the two reference points
/// (`l_if + l_jr + d_g`, or zero for a cross-lane edge). The result is clamped
/// to `[−d_max, a_max]`.
pub fn consensus_accel(
    own: Kinematics,
    target_delayed: Kinematics,
    spacing: f64,
    gamma: f64,
    a_max: f64,
    d_max: f64,
) -> f64 {
    let raw = -(own.x - target_delayed.x + spacing) - gamma * (own.v - target_delayed.v);
    raw.clamp(-d_max, a_max)
}

/// Time-stamped state history of one vehicle, queried at `t − τ`.
#[derive(Debug, Clone, Default)]
pub struct DelayBuffer {
    samples: VecDeque<(f64, Kinematics)>,
    keep_for: f64,
}

impl DelayBuffer {
    /// A buffer that retains at least `keep_for` seconds of history.
    pub fn new(keep_for: f64) -> Self {
        DelayBuffer {
            samples: VecDeque::new(),
            keep_for,
        }
    }

    /// Appends a sample; times must be non-decreasing.
    pub fn push(&mut self, t: f64, state: Kinematics) {
        debug_assert!(self.samples.back().is_none_or(|(tb, _)| t >= *tb));
        self.samples.push_back((t, state));
        while self.samples.len() > 2 && self.samples[1].0 < t - self.keep_for {
            self.samples.pop_front();
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// State at time `t`, linearly interpolated between the bracketing samples.
    /// Times past the newest sample return the newest one and times before the
    /// oldest return the oldest, so the buffer never extrapolates.
    pub fn query(&self, t: f64) -> Option<Kinematics> {
        let (t_first, first) = *self.samples.front()?;
        let (t_last, last) = *self.samples.back()?;
        if t >= t_last {
            return Some(last);
        }
        if t <= t_first {
            return Some(first);
        }
        let i = self.samples.partition_point(|(ts, _)| *ts <= t);
        let (t0, s0) = self.samples[i - 1];
        let (t1, s1) = self.samples[i];
        let w = (t - t0) / (t1 - t0);
        Some(Kinematics {
            x: s0.x + w * (s1.x - s0.x),
            v: s0.v + w * (s1.v - s0.v),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Actuation {
    /// Net engine force at the wheels (N).
    EngineForce(f64),
    /// Brake torque magnitude (N·m).
    BrakeTorque(f64),
}

fn resistance(speed: f64, d: &VehicleDynamics) -> f64 {
    d.drag_coeff * speed * speed + d.friction_coeff * speed + d.mech_drag_n
}

/// Engine force or brake torque that produces `accel` at `speed`.
pub fn inverse_dynamics(accel: f64, speed: f64, d: &VehicleDynamics) -> Actuation {
    let demand = accel * d.mass_kg + resistance(speed, d);
    if demand >= 0.0 {
        Actuation::EngineForce(demand)
    } else {
        Actuation::BrakeTorque(-demand / d.gear_ratio)
    }
}

/// Acceleration produced by `act` at `speed` under the plant model.
pub fn forward_dynamics(act: Actuation, speed: f64, d: &VehicleDynamics) -> f64 {
    let force = match act {
        Actuation::EngineForce(f) => f,
        Actuation::BrakeTorque(t) => -t * d.gear_ratio,
    };
    (force - resistance(speed, d)) / d.mass_kg
}

/// Setup for a leader cruising at constant speed with one follower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSetup {
    pub leader_speed: f64,
    /// Initial spacing error, positive when the follower is too far back (m).
    pub gap_error: f64,
    /// Initial follower speed minus leader speed (m/s).
    pub speed_error: f64,
    pub headway: f64,
    pub lengths: f64,
    pub d_safe: f64,
    pub braking_factor: f64,
    pub tau: f64,
    pub gamma: f64,
    pub a_max: f64,
    pub d_max: f64,
    pub v_lim: f64,
    pub dt: f64,
    pub duration: f64,
}

/// Per-step record of a pair run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub t: f64,
    /// Spacing error against the delayed leader state.
    pub gap_error: f64,
    pub speed_error: f64,
    /// Bumper-to-bumper distance.
    pub bumper_gap: f64,
    pub accel: f64,
}

/// Runs the consensus law for one follower behind a constant-speed leader
/// with the same integrator and delay handling as the simulation engine.
pub fn simulate_pair(s: &PairSetup) -> Vec<PairSample> {
    let gap_policy = |v_pred: f64| GapPolicy {
        t_g: time_gap_from_headway(s.headway, s.lengths, v_pred),
        d_safe: s.d_safe,
        braking_factor: s.braking_factor,
        cross_lane: false,
    };
    let spacing = |v_pred: f64| s.lengths + desired_gap(v_pred, &gap_policy(v_pred), s.tau);

    let mut lead = Kinematics { x: 0.0, v: s.leader_speed };
    let mut own = Kinematics {
        // errors are measured against the delayed leader, which trails by v·τ
        x: -(s.leader_speed * s.tau + spacing(s.leader_speed) + s.gap_error),
        v: (s.leader_speed + s.speed_error).clamp(0.0, s.v_lim),
    };
    let mut buf = DelayBuffer::new(s.tau + 2.0 * s.dt);
    // history before t = 0 is the same steady motion
    buf.push(-s.tau - s.dt, Kinematics { x: lead.x - s.leader_speed * (s.tau + s.dt), v: lead.v });
    buf.push(0.0, lead);

    let steps = (s.duration / s.dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * s.dt;
        let delayed = buf.query(t - s.tau).expect("buffer seeded");
        let gap_error = delayed.x - own.x - spacing(delayed.v);
        let accel = consensus_accel(own, delayed, spacing(delayed.v), s.gamma, s.a_max, s.d_max);
        out.push(PairSample {
            t,
            gap_error,
            speed_error: own.v - lead.v,
            bumper_gap: lead.x - own.x - s.lengths,
            accel,
        });
        if k == steps {
            break;
        }
        own.v = (own.v + accel * s.dt).clamp(0.0, s.v_lim);
        own.x += own.v * s.dt;
        lead.x += lead.v * s.dt;
        buf.push(t + s.dt, lead);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{GreenWindow, VehicleId};
    use crate::sequencing::{spt_sequence, Candidate, SequencingParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dynamics() -> VehicleDynamics {
        VehicleDynamics {
            mass_kg: 1500.0,
            drag_coeff: 0.4,
            friction_coeff: 0.1,
            mech_drag_n: 100.0,
            gear_ratio: 8.0,
        }
    }

    fn cluster(lanes: &[(u32, usize, f64)]) -> SequencedCluster {
        let c: Vec<Candidate> = lanes
            .iter()
            .map(|&(id, lane, t)| Candidate {
                vehicle_id: VehicleId(id),
                lane,
                distance: 300.0 + 30.0 * id as f64,
                earliest: t,
            })
            .collect();
        let p = SequencingParams {
            lane_count: 2,
            t_min_h: 1.0,
            d_min_h: 10.0,
            allow_lane_change: false,
        };
        spt_sequence(&c, GreenWindow::new(27.0, 35.0), &p).unwrap()
    }

    #[test]
    fn topology_shapes() {
        let single = cluster(&[(1, 0, 20.0)]);
        assert!(build_topology(&single).edges.is_empty());

        let chain = cluster(&[(1, 0, 20.0), (2, 0, 21.0), (3, 0, 22.0)]);
        let t = build_topology(&chain);
        assert_eq!(t.edges.len(), 2);
        assert_eq!(t.edge_of(VehicleId(3)).unwrap().target, VehicleId(2));
        assert_eq!(t.role(VehicleId(1)), Some(Role::ClusterLeader));

        let two = cluster(&[(1, 0, 20.0), (2, 1, 21.0), (3, 1, 22.0), (4, 0, 23.0)]);
        let t = build_topology(&two);
        assert_eq!(t.edges.len(), 3);
        let e = t.edge_of(VehicleId(2)).unwrap();
        assert!(e.cross_lane && e.target == VehicleId(1));
        assert_eq!(t.role(VehicleId(2)), Some(Role::StringLeader));
        assert!(t.roles.keys().all(|&id| t.reaches_leader(id)));
    }

    #[test]
    fn gap_examples() {
        let p = GapPolicy {
            t_g: 0.62,
            d_safe: 2.0,
            braking_factor: 1.0,
            cross_lane: false,
        };
        assert_abs_diff_eq!(desired_gap(13.0, &p, 0.06), 8.84, epsilon = 1e-9);
        assert_eq!(desired_gap(0.0, &p, 0.06), 2.0);
        assert_abs_diff_eq!(desired_gap(17.88, &p, 0.06), 12.1584, epsilon = 1e-9);
        let cross = GapPolicy { cross_lane: true, ..p };
        assert_eq!(desired_gap(13.0, &cross, 0.06), 0.0);
    }

    #[test]
    fn time_gap_relation() {
        let t_g = time_gap_from_headway(1.0, 5.0, 13.0);
        assert_abs_diff_eq!(t_g + 5.0 / 13.0, 1.0, epsilon = 1e-12);
        assert_eq!(time_gap_from_headway(1.0, 5.0, 2.0), 0.0);
        assert_eq!(time_gap_from_headway(1.0, 5.0, 0.0), 0.0);
    }

    #[test]
    fn consensus_examples() {
        let lead = Kinematics { x: 20.0, v: 12.0 };
        let at_rest = Kinematics { x: 5.0, v: 12.0 };
        assert_eq!(consensus_accel(at_rest, lead, 15.0, 1.5, 3.5, 3.5), 0.0);

        let far = Kinematics { x: -5.0, v: 12.0 };
        assert_eq!(consensus_accel(far, lead, 15.0, 1.5, 3.5, 3.5), 3.5);

        let slow = Kinematics { x: 3.0, v: 11.5 };
        assert_abs_diff_eq!(consensus_accel(slow, lead, 15.0, 1.5, 3.5, 3.5), 2.75, epsilon = 1e-12);
    }

    #[test]
    fn delay_buffer_interpolates() {
        let mut b = DelayBuffer::new(1.0);
        assert!(b.query(0.0).is_none());
        b.push(0.0, Kinematics { x: 0.0, v: 10.0 });
        b.push(0.1, Kinematics { x: 1.0, v: 11.0 });
        let q = b.query(0.04).unwrap();
        assert_abs_diff_eq!(q.x, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(q.v, 10.4, epsilon = 1e-12);
        // no extrapolation either way
        assert_eq!(b.query(0.5).unwrap().x, 1.0);
        assert_eq!(b.query(-1.0).unwrap().x, 0.0);
        for k in 2..50 {
            b.push(k as f64 * 0.1, Kinematics { x: k as f64, v: 10.0 });
        }
        // old history trimmed, recent history intact
        assert!(b.samples.len() < 15);
        assert_abs_diff_eq!(b.query(4.84).unwrap().x, 48.4, epsilon = 1e-9);
    }

    #[test]
    fn inverse_dynamics_examples() {
        let d = dynamics();
        assert_eq!(inverse_dynamics(0.0, 15.0, &d), Actuation::EngineForce(191.5));
        assert_eq!(inverse_dynamics(2.0, 15.0, &d), Actuation::EngineForce(3191.5));
        match inverse_dynamics(-3.0, 15.0, &d) {
            Actuation::BrakeTorque(t) => assert_abs_diff_eq!(t, 538.5625, epsilon = 1e-9),
            other => panic!("expected braking, got {other:?}"),
        }
    }

    fn pair(gap_error: f64, speed_error: f64, headway: f64) -> PairSetup {
        PairSetup {
            leader_speed: 14.0,
            gap_error,
            speed_error,
            headway,
            lengths: 5.0,
            d_safe: 2.0,
            braking_factor: 1.0,
            tau: 0.06,
            gamma: 1.5,
            a_max: 3.5,
            d_max: 3.5,
            v_lim: 17.88,
            dt: 0.1,
            duration: 30.0,
        }
    }

    #[test]
    fn pair_at_rest_stays_at_rest() {
        let trace = simulate_pair(&pair(0.0, 0.0, 1.0));
        for s in trace {
            assert!(s.gap_error.abs() < 1e-9 && s.speed_error.abs() < 1e-12);
        }
    }

    fn overshoot(trace: &[PairSample]) -> f64 {
        // initial error is positive, so overshoot is how far it goes negative
        -trace.iter().map(|s| s.gap_error).fold(0.0, f64::min)
    }

    #[test]
    fn gamma_sweep() {
        for gamma in [0.3, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0] {
            let trace = simulate_pair(&PairSetup { gamma, ..pair(10.0, 0.0, 2.0) });
            let last = trace.last().unwrap();
            eprintln!("gamma {gamma}: overshoot {:.3} m, final {:.2e} m", overshoot(&trace), last.gap_error);
        }
        // the default settles inside 30 s with a small overshoot; a light
        // damping gain rings noticeably
        let trace = simulate_pair(&pair(10.0, 0.0, 2.0));
        let last = trace.last().unwrap();
        assert!(last.gap_error.abs() < 0.1 && last.speed_error.abs() < 0.05);
        assert!(overshoot(&trace) < 0.5);
        let light = simulate_pair(&PairSetup { gamma: 0.3, ..pair(10.0, 0.0, 2.0) });
        assert!(overshoot(&light) > 2.0);
    }

    fn worst_gap_mismatch(setup: PairSetup, dt: f64) -> f64 {
        let coarse = simulate_pair(&PairSetup { dt, ..setup });
        let fine = simulate_pair(&PairSetup { dt: 1e-3, ..setup });
        let stride = (dt / 1e-3).round() as usize;
        coarse
            .iter()
            .zip(fine.iter().step_by(stride))
            .map(|(c, f)| {
                assert!((c.t - f.t).abs() < 1e-9);
                (c.bumper_gap - f.bumper_gap).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn sub_step_delay_matches_dense_reference() {
        // the delay is shorter than a step, so the target comes from interpolation
        for (ge, se) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 0.3), (1.5, 0.3)] {
            let worst = worst_gap_mismatch(pair(ge, se, 1.0), 0.1);
            assert!(worst < 0.05, "({ge}, {se}): {worst}");
        }
    }

    #[test]
    fn dense_mismatch_is_first_order_in_step() {
        // larger transients leave an integrator offset of about dt/2 times the
        // speed excursion; halving the step halves it
        for (ge, se) in [(5.0, 0.0), (-3.0, 1.0), (10.0, -2.0)] {
            let at_100ms = worst_gap_mismatch(pair(ge, se, 1.0), 0.1);
            let at_50ms = worst_gap_mismatch(pair(ge, se, 1.0), 0.05);
            let ratio = at_50ms / at_100ms;
            assert!((0.4..0.6).contains(&ratio), "({ge}, {se}): {at_100ms} -> {at_50ms}");
        }
    }

    proptest! {
        #[test]
        fn dynamics_round_trip(accel in -3.5f64..3.5, speed in 0.0f64..20.0) {
            let d = dynamics();
            let back = forward_dynamics(inverse_dynamics(accel, speed, &d), speed, &d);
            prop_assert!((back - accel).abs() < 1e-12);
        }

        #[test]
        fn clamp_respected(dx in -100.0f64..100.0, dv in -10.0f64..10.0) {
            let a = consensus_accel(
                Kinematics { x: 0.0, v: 10.0 },
                Kinematics { x: dx, v: 10.0 + dv },
                10.0, 1.5, 3.5, 3.0,
            );
            prop_assert!((-3.0..=3.5).contains(&a));
        }
    }
}
