//! Fixed-step simulation of the cooperative policy and the ego baseline.
//!
//! Positions are those of each vehicle's antenna reference point, the point the
//! scenario distances refer to, measured from the stop bar (negative upstream).

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::clustering::earliest_arrival;
use crate::ead_profile::{
    arrival_bounds, plan_leader_profile, plan_profile_to_target, MotionLimits,
    ProfileError, TrigProfile,
};
use crate::platoon_control::{
    build_topology, consensus_accel, desired_gap, time_gap_from_headway, DelayBuffer, GapPolicy,
    Kinematics,
};
use crate::scenario::{build_green_windows, Phase, GreenWindow, GreenWindowSet, Scenario, VehicleId, VehicleSpec};
use crate::sequencing::{
    lane_order_sequence, sequence_clusters, Candidate, ClusterPlan, SequencedCluster, SequencingError,
    SequencingParams,
};

/// A vehicle counts as past a reference line once it is this far beyond it,
/// so a stop exactly on the stop bar is not a crossing.
pub const CROSSING_EPS: f64 = 1e-6;

/// Gains of the tracking law used once a profile follower leaves its reference.
const TRACK_KP: f64 = 0.5;
const TRACK_KV: f64 = 1.2;

/// Distance short of the stop bar at which a restrained vehicle halts.
const BAR_STANDOFF: f64 = 0.1;

/// Speed-error gain and acceleration ceiling of queue discharge.
const DISCHARGE_GAIN: f64 = 0.5;
const DISCHARGE_ACCEL: f64 = 1.5;

/// Longest a lane change waits for its distance check before it proceeds anyway.
const MAX_LANE_CHANGE_DEFERRAL: f64 = 10.0;

/// Largest green-window horizon tried when vehicles are left unscheduled.
const MAX_HORIZON: usize = 20;

/// Simulated time after the last planned crossing.
const RUN_OUT: f64 = 120.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Sequencing(#[from] SequencingError),
    #[error("profile planning failed for vehicle {id}: {source}")]
    Profile {
        id: VehicleId,
        #[source]
        source: ProfileError,
    },
    #[error("vehicles {0:?} fit no green window within {MAX_HORIZON} cycles")]
    Unschedulable(Vec<VehicleId>),
    #[error("state of vehicle {id} diverged at t = {t:.2} s (x = {x}, v = {v}, a = {a})")]
    Diverged {
        id: VehicleId,
        t: f64,
        x: f64,
        v: f64,
        a: f64,
    },
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Coop,
    Ego,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Coop => "coop",
            Policy::Ego => "ego",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Clustering,
    LaneChanging,
    Forming,
    EadApproach,
    Departed,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Clustering => "clustering",
            Mode::LaneChanging => "lane_changing",
            Mode::Forming => "forming",
            Mode::EadApproach => "ead_approach",
            Mode::Departed => "departed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaneChangePlan {
    pub vehicle_id: VehicleId,
    pub from_lane: usize,
    pub to_lane: usize,
    /// Actual start; equal to the request time unless the distance check deferred it.
    pub start_t: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VehicleState {
    pub t: f64,
    pub vehicle_id: VehicleId,
    pub lane: usize,
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub mode: Mode,
}

/// Per-step rows plus interpolated line-crossing times.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub rows: Vec<VehicleState>,
    /// Stop-bar crossing time of each vehicle that crossed.
    pub crossings: BTreeMap<VehicleId, f64>,
    /// Time each vehicle reached the trip end downstream of the stop bar.
    pub trip_end_times: BTreeMap<VehicleId, f64>,
    pub trip_end: f64,
}

pub const CSV_HEADER: &str = "t,vehicle_id,lane,pos_m,speed_mps,accel_mps2,mode";

impl TrajectoryLog {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vehicle_ids(&self) -> Vec<VehicleId> {
        let mut ids: Vec<VehicleId> = self.rows.iter().map(|r| r.vehicle_id).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Rows of one vehicle in time order.
    pub fn vehicle_rows(&self, id: VehicleId) -> Vec<VehicleState> {
        self.rows.iter().filter(|r| r.vehicle_id == id).copied().collect()
    }

    pub fn crossing_time(&self, id: VehicleId) -> Option<f64> {
        self.crossings.get(&id).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:.3},{},{},{:.6},{:.6},{:.6},{}\n",
                r.t,
                r.vehicle_id,
                r.lane,
                r.x,
                r.v,
                r.a,
                r.mode.as_str()
            ));
        }
        out
    }
}

/// A planned speed profile and when it started.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileRecord {
    pub vehicle_id: VehicleId,
    pub start_t: f64,
    pub profile: TrigProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutput {
    pub policy: Policy,
    pub windows: Vec<GreenWindow>,
    pub plan: ClusterPlan,
    pub lane_changes: Vec<LaneChangePlan>,
    pub profiles: Vec<ProfileRecord>,
    pub log: TrajectoryLog,
}

/// Overrides for a run; `None` keeps the scenario value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimOptions {
    pub dt: Option<f64>,
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Control {
    /// Follows a speed profile, exactly while on reference.
    Profile {
        profile: TrigProfile,
        t0: f64,
        x0: f64,
        on_reference: bool,
    },
    /// Leader that plans its profile once its lane change is over.
    PendingProfile { window: GreenWindow },
    Consensus {
        target: usize,
        cross_lane: bool,
        closing: GapClosing,
    },
    /// No plan: hold speed.
    Hold,
    /// Ego vehicle cruising until its target crossing can be planned.
    EgoPending { target: f64, latest: f64 },
    /// Ego vehicle pushed off its profile by traffic ahead: speeds back up to
    /// its cruise speed as the queue discharges.
    Discharge { v_target: f64 },
}

/// Spacing error present when formation starts, faded out along a cosine
/// ramp over `[t_start, t_end]` so the gap closes without a sprint.
#[derive(Debug, Clone, Copy, Default)]
struct GapClosing {
    initial_error: f64,
    t_start: f64,
    t_end: f64,
}

impl GapClosing {
    /// Extra spacing on top of the policy spacing, and its rate of change.
    fn offset(&self, t: f64) -> (f64, f64) {
        let span = self.t_end - self.t_start;
        if t >= self.t_end || span <= 0.0 {
            return (0.0, 0.0);
        }
        let w = std::f64::consts::PI / span;
        let phase = w * (t - self.t_start).max(0.0);
        (
            0.5 * self.initial_error * (1.0 + phase.cos()),
            -0.5 * self.initial_error * w * phase.sin(),
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingChange {
    to_lane: usize,
    requested: f64,
    start: Option<f64>,
    neighbours: [Option<usize>; 2],
}

#[derive(Debug, Clone)]
struct SimVehicle {
    spec: VehicleSpec,
    lane: usize,
    x: f64,
    v: f64,
    a: f64,
    mode: Mode,
    control: Control,
    change: Option<PendingChange>,
    buffer: DelayBuffer,
    crossing: Option<f64>,
    trip_end: Option<f64>,
    /// Whether the vehicle may pass the current non-green interval, decided
    /// once when the interval is first seen: true if it could not stop then.
    passes_on_amber: Option<bool>,
}

impl SimVehicle {
    fn limits(&self) -> MotionLimits {
        MotionLimits {
            a_max: self.spec.a_max,
            d_max: self.spec.d_max,
            jerk_max: self.spec.jerk_max,
        }
    }
}

fn index_of(fleet: &[VehicleSpec]) -> BTreeMap<VehicleId, usize> {
    fleet.iter().enumerate().map(|(i, v)| (v.id, i)).collect()
}

fn windows_covering(
    scenario: &Scenario,
    horizon: usize,
    mut plan_with: impl FnMut(&GreenWindowSet) -> Result<ClusterPlan, SequencingError>,
) -> Result<(GreenWindowSet, ClusterPlan), EngineError> {
    let mut h = horizon.max(1);
    loop {
        let windows = build_green_windows(&scenario.signal, 0.0, h);
        let plan = plan_with(&windows)?;
        if plan.unscheduled.is_empty() {
            return Ok((windows, plan));
        }
        if h >= MAX_HORIZON {
            return Err(EngineError::Unschedulable(plan.unscheduled));
        }
        h += 1;
    }
}

fn coop_candidates(scenario: &Scenario) -> Vec<Candidate> {
    scenario
        .fleet
        .iter()
        .map(|v| {
            let e = earliest_arrival(v.id, v.initial_speed, v.initial_distance, scenario.speed_limit(), v.a_max, 0.0);
            Candidate {
                vehicle_id: v.id,
                lane: v.initial_lane,
                distance: v.initial_distance,
                earliest: e.arrival_time,
            }
        })
        .collect()
}

fn limits_of(v: &VehicleSpec) -> MotionLimits {
    MotionLimits {
        a_max: v.a_max,
        d_max: v.d_max,
        jerk_max: v.jerk_max,
    }
}

/// Earliest crossing an ego vehicle could make on its own: its earliest
/// arrival, or the start of the first green it can still reach if that is later.
fn ego_own_arrival(scenario: &Scenario, v: &VehicleSpec, windows: &GreenWindowSet) -> Result<f64, ProfileError> {
    let bounds = arrival_bounds(
        v.initial_speed,
        v.initial_distance,
        scenario.speed_limit(),
        scenario.policy.coast_speed,
        &limits_of(v),
    )?;
    Ok(match windows.first_open_at_or_after(bounds.t_e) {
        Some(k) => bounds.t_e.max(windows.windows()[k].start_s),
        None => bounds.t_e,
    })
}

/// Lane changes for a sequenced cluster: one per vehicle whose assigned lane
/// differs from its current lane, requested at `t`. The start time recorded
/// here is the request time; deferrals move it in the simulation.
pub fn plan_lane_changes(seq: &SequencedCluster, current_lanes: &BTreeMap<VehicleId, usize>, t: f64, duration: f64) -> Vec<LaneChangePlan> {
    seq.assignments
        .iter()
        .filter_map(|a| {
            let from = *current_lanes.get(&a.vehicle_id)?;
            (from != a.lane).then_some(LaneChangePlan {
                vehicle_id: a.vehicle_id,
                from_lane: from,
                to_lane: a.lane,
                start_t: t,
                duration,
            })
        })
        .collect()
}

pub fn run_simulation(scenario: &Scenario, policy: Policy) -> Result<SimulationOutput, EngineError> {
    run_simulation_with(scenario, policy, &SimOptions::default())
}

pub fn run_ego_baseline(scenario: &Scenario) -> Result<SimulationOutput, EngineError> {
    run_simulation(scenario, Policy::Ego)
}

pub fn run_simulation_with(
    scenario: &Scenario,
    policy: Policy,
    options: &SimOptions,
) -> Result<SimulationOutput, EngineError> {
    let dt = options.dt.unwrap_or(scenario.policy.dt);
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(EngineError::InvalidOption(format!("dt must be positive, got {dt}")));
    }
    let horizon = options.horizon.unwrap_or(scenario.policy.horizon);
    if scenario.fleet.is_empty() {
        return Ok(SimulationOutput {
            policy,
            windows: Vec::new(),
            plan: ClusterPlan::default(),
            lane_changes: Vec::new(),
            profiles: Vec::new(),
            log: TrajectoryLog {
                dt,
                trip_end: scenario.policy.trip_end,
                ..TrajectoryLog::default()
            },
        });
    }

    let p = &scenario.policy;
    let mut sim = Simulation::new(scenario, policy, dt);
    let (windows, plan) = match policy {
        Policy::Coop => {
            let params = SequencingParams {
                lane_count: scenario.road.lane_count,
                t_min_h: p.headway_coop,
                d_min_h: p.lane_change_gap,
                allow_lane_change: true,
            };
            let cands = coop_candidates(scenario);
            let (windows, plan) = windows_covering(scenario, horizon, |w| sequence_clusters(&cands, w, &params))?;
            sim.setup_coop(&plan)?;
            (windows, plan)
        }
        Policy::Ego => {
            let params = SequencingParams {
                lane_count: scenario.road.lane_count,
                t_min_h: p.headway_ego,
                d_min_h: p.lane_change_gap,
                allow_lane_change: false,
            };
            let mut profile_err = None;
            let (windows, plan) = windows_covering(scenario, horizon, |w| {
                let cands: Vec<Candidate> = scenario
                    .fleet
                    .iter()
                    .map(|v| Candidate {
                        vehicle_id: v.id,
                        lane: v.initial_lane,
                        distance: v.initial_distance,
                        earliest: ego_own_arrival(scenario, v, w).unwrap_or_else(|e| {
                            profile_err.get_or_insert((v.id, e));
                            f64::INFINITY
                        }),
                    })
                    .collect();
                lane_order_sequence(&cands, w, &params)
            })?;
            if let Some((id, source)) = profile_err {
                return Err(EngineError::Profile { id, source });
            }
            sim.setup_ego(&plan);
            (windows, plan)
        }
    };

    let last_slot = plan
        .clusters
        .iter()
        .flat_map(|c| c.assignments.iter().map(|a| a.slot_time))
        .fold(0.0, f64::max);
    sim.run(last_slot + RUN_OUT)?;

    let lane_changes = sim.lane_change_log.clone();
    let profiles = sim.profile_log.clone();
    Ok(SimulationOutput {
        policy,
        windows: windows.windows().to_vec(),
        plan,
        lane_changes,
        profiles,
        log: sim.log,
    })
}

struct Simulation<'a> {
    scenario: &'a Scenario,
    policy: Policy,
    dt: f64,
    vehicles: Vec<SimVehicle>,
    index: BTreeMap<VehicleId, usize>,
    /// Control headway that makes the consensus law's steady state match the
    /// slot spacing: the law settles at `t_h + 2τ`.
    coop_control_headway: f64,
    lane_change_log: Vec<LaneChangePlan>,
    profile_log: Vec<ProfileRecord>,
    log: TrajectoryLog,
}

impl<'a> Simulation<'a> {
    fn new(scenario: &'a Scenario, policy: Policy, dt: f64) -> Self {
        let p = &scenario.policy;
        let keep = p.delay + 2.0 * dt;
        let vehicles = scenario
            .fleet
            .iter()
            .map(|spec| {
                let mut buffer = DelayBuffer::new(keep);
                let x = -spec.initial_distance;
                let v = spec.initial_speed;
                // steady motion before the start
                buffer.push(-keep, Kinematics { x: x - v * keep, v });
                buffer.push(0.0, Kinematics { x, v });
                SimVehicle {
                    spec: spec.clone(),
                    lane: spec.initial_lane,
                    x,
                    v,
                    a: 0.0,
                    mode: Mode::Clustering,
                    control: Control::Hold,
                    change: None,
                    buffer,
                    crossing: None,
                    trip_end: None,
                    passes_on_amber: None,
                }
            })
            .collect();
        Simulation {
            scenario,
            policy,
            dt,
            vehicles,
            index: index_of(&scenario.fleet),
            coop_control_headway: (p.headway_coop - 2.0 * p.delay).max(0.0),
            lane_change_log: Vec::new(),
            profile_log: Vec::new(),
            log: TrajectoryLog {
                dt,
                trip_end: p.trip_end,
                ..TrajectoryLog::default()
            },
        }
    }

    fn idx(&self, id: VehicleId) -> usize {
        self.index[&id]
    }

    fn start_profile(&mut self, i: usize, profile: TrigProfile, t0: f64) {
        let veh = &mut self.vehicles[i];
        veh.control = Control::Profile {
            profile,
            t0,
            x0: veh.x,
            on_reference: true,
        };
        self.profile_log.push(ProfileRecord {
            vehicle_id: veh.spec.id,
            start_t: t0,
            profile,
        });
    }

    fn plan_leader(&mut self, i: usize, window: GreenWindow, t0: f64) -> Result<(), EngineError> {
        let veh = &self.vehicles[i];
        let profile = plan_leader_profile(
            veh.v,
            -veh.x,
            t0,
            &window,
            self.scenario.speed_limit(),
            self.scenario.policy.coast_speed,
            &veh.limits(),
        )
        .map_err(|source| EngineError::Profile { id: veh.spec.id, source })?;
        self.start_profile(i, profile, t0);
        Ok(())
    }

    fn setup_coop(&mut self, plan: &ClusterPlan) -> Result<(), EngineError> {
        let lanes: BTreeMap<VehicleId, usize> = self.vehicles.iter().map(|v| (v.spec.id, v.lane)).collect();
        for cluster in &plan.clusters {
            let topo = build_topology(cluster);
            for change in plan_lane_changes(cluster, &lanes, 0.0, self.scenario.policy.lane_change_duration) {
                let a = cluster.assignment(change.vehicle_id).expect("member");
                let neighbour = |q: usize| {
                    cluster
                        .assignments
                        .iter()
                        .find(|b| b.lane == a.lane && b.position == q)
                        .map(|b| self.idx(b.vehicle_id))
                };
                let i = self.idx(change.vehicle_id);
                let neighbours = [neighbour(a.position.wrapping_sub(1)), neighbour(a.position + 1)];
                self.vehicles[i].change = Some(PendingChange {
                    to_lane: change.to_lane,
                    requested: 0.0,
                    start: None,
                    neighbours,
                });
            }
            for a in &cluster.assignments {
                let i = self.idx(a.vehicle_id);
                self.vehicles[i].mode = Mode::EadApproach;
                if a.vehicle_id == topo.leader {
                    if self.vehicles[i].change.is_some() {
                        self.vehicles[i].control = Control::PendingProfile { window: cluster.window };
                    } else {
                        self.plan_leader(i, cluster.window, 0.0)?;
                    }
                } else {
                    let e = topo.edge_of(a.vehicle_id).expect("non-leader has an edge");
                    self.vehicles[i].control = Control::Consensus {
                        target: self.idx(e.target),
                        cross_lane: e.cross_lane,
                        closing: GapClosing {
                            t_end: a.slot_time,
                            ..GapClosing::default()
                        },
                    };
                    self.capture_gap_error(i, 0.0);
                }
            }
        }
        Ok(())
    }

    /// Starts the gap-closing ramp of a follower from its spacing error at `t`.
    fn capture_gap_error(&mut self, i: usize, t: f64) {
        let Control::Consensus { target, cross_lane, closing } = self.vehicles[i].control else { return };
        let delayed = self.vehicles[target]
            .buffer
            .query(t - self.scenario.policy.delay)
            .expect("buffers cover the delay");
        let spacing = self.policy_spacing(i, target, cross_lane, delayed.v);
        self.vehicles[i].control = Control::Consensus {
            target,
            cross_lane,
            closing: GapClosing {
                initial_error: delayed.x - self.vehicles[i].x - spacing,
                t_start: t,
                ..closing
            },
        };
    }

    fn setup_ego(&mut self, plan: &ClusterPlan) {
        for cluster in &plan.clusters {
            for a in &cluster.assignments {
                let i = self.idx(a.vehicle_id);
                self.vehicles[i].mode = Mode::EadApproach;
                self.vehicles[i].control = Control::EgoPending {
                    target: a.slot_time,
                    latest: cluster.window.end_s,
                };
            }
        }
    }

    /// Commits ego vehicles to a profile once their target is reachable by a
    /// no-stop profile or by a complete stop. A vehicle whose target lies past
    /// its latest no-stop arrival but that could not yet finish a stop by then
    /// keeps cruising and checks again on the next step.
    fn commit_ego_plans(&mut self, t: f64) -> Result<(), EngineError> {
        let p = &self.scenario.policy;
        let (v_lim, v_coast) = (self.scenario.speed_limit(), p.coast_speed);
        for i in 0..self.vehicles.len() {
            let veh = &self.vehicles[i];
            let Control::EgoPending { target, latest } = veh.control else { continue };
            let (v, d) = (veh.v, -veh.x);
            let fail = |source| EngineError::Profile { id: veh.spec.id, source };
            let ready = v <= 0.0 || d <= 0.0 || {
                let bounds = arrival_bounds(v, d, v_lim, v_coast, &veh.limits()).map_err(fail)?;
                let rel = target - t;
                rel <= bounds.t_l + 1e-9 || 2.0 * d / v <= rel + 1e-9
            };
            if !ready {
                continue;
            }
            if d <= 0.0 {
                self.vehicles[i].control = Control::Hold;
                continue;
            }
            let profile = plan_profile_to_target(v, d, target - t, latest - t, v_lim, v_coast, &veh.limits())
                .map_err(fail)?;
            self.start_profile(i, profile, t);
        }
        Ok(())
    }

    /// Desired front-to-front spacing behind `target` at its delayed speed.
    fn policy_spacing(&self, i: usize, target: usize, cross_lane: bool, target_speed: f64) -> f64 {
        if cross_lane {
            return 0.0;
        }
        let p = &self.scenario.policy;
        let (me, tgt) = (&self.vehicles[i], &self.vehicles[target]);
        let lengths = me.spec.l_front + tgt.spec.l_rear;
        let policy = GapPolicy {
            t_g: time_gap_from_headway(self.coop_control_headway, lengths, target_speed),
            d_safe: p.d_safe,
            braking_factor: me.spec.braking_factor,
            cross_lane: false,
        };
        lengths + desired_gap(target_speed, &policy, p.delay)
    }

    /// Nearest vehicle ahead in the same lane.
    fn physical_predecessor(&self, i: usize) -> Option<usize> {
        let me = &self.vehicles[i];
        self.vehicles
            .iter()
            .enumerate()
            .filter(|(j, o)| *j != i && o.lane == me.lane && o.x > me.x)
            .min_by(|a, b| a.1.x.total_cmp(&b.1.x))
            .map(|(j, _)| j)
    }

    /// Largest acceleration that keeps the vehicle able to stop `d_safe`
    /// behind its physical predecessor should that one brake at the same rate.
    fn safety_cap(&self, i: usize, pred: usize) -> f64 {
        let me = &self.vehicles[i];
        let other = &self.vehicles[pred];
        let gap = (other.x - other.spec.l_rear) - (me.x + me.spec.l_front);
        let room = (gap - self.scenario.policy.d_safe - me.v * self.dt).max(0.0);
        let v_safe = (other.v * other.v + 2.0 * me.spec.d_max * room).sqrt();
        (v_safe - me.v) / self.dt
    }

    /// Keeps a discharging vehicle at least the ego time headway behind its
    /// predecessor, measured bumper to bumper beyond `d_safe`.
    fn headway_cap(&self, i: usize, pred: usize) -> f64 {
        let me = &self.vehicles[i];
        let other = &self.vehicles[pred];
        let p = &self.scenario.policy;
        let gap = (other.x - other.spec.l_rear) - (me.x + me.spec.l_front);
        let v_head = ((gap - p.d_safe) / p.headway_ego).max(0.0);
        (v_head - me.v) / self.dt
    }

    fn commanded_accel(&self, i: usize, t: f64) -> (f64, bool) {
        let veh = &self.vehicles[i];
        let (a_max, d_max) = (veh.spec.a_max, veh.spec.d_max);
        if veh.mode == Mode::LaneChanging {
            return (0.0, true);
        }
        let pred = self.physical_predecessor(i);
        let ahead = pred.map_or(f64::INFINITY, |j| self.safety_cap(i, j));
        let cap = ahead.min(self.stop_bar_cap(i, t));
        match veh.control {
            Control::Hold | Control::PendingProfile { .. } | Control::EgoPending { .. } => {
                (0.0f64.min(cap).clamp(-d_max, a_max), false)
            }
            Control::Discharge { v_target } => {
                let a = (DISCHARGE_GAIN * (v_target - veh.v)).min(DISCHARGE_ACCEL);
                let headway = match pred {
                    Some(j) if veh.crossing.is_none() => self.headway_cap(i, j),
                    _ => f64::INFINITY,
                };
                (a.min(cap).min(headway).clamp(-d_max, a_max), false)
            }
            Control::Profile {
                profile,
                t0,
                x0,
                on_reference,
            } => {
                let r = profile.eval(t - t0);
                if on_reference && r.accel <= ahead + 1e-12 {
                    return (r.accel.clamp(-d_max, a_max), true);
                }
                let wanted = if on_reference {
                    r.accel
                } else {
                    r.accel + TRACK_KP * (x0 + r.position - veh.x) + TRACK_KV * (r.speed - veh.v)
                };
                (wanted.min(cap).clamp(-d_max, a_max), false)
            }
            Control::Consensus {
                target,
                cross_lane,
                closing,
            } => {
                let p = &self.scenario.policy;
                let tgt = &self.vehicles[target];
                let mut delayed = tgt.buffer.query(t - p.delay).expect("buffers are seeded");
                let spacing = self.policy_spacing(i, target, cross_lane, delayed.v);
                let (extra, extra_rate) = closing.offset(t);
                delayed.x -= extra;
                delayed.v -= extra_rate;
                let own = Kinematics { x: veh.x, v: veh.v };
                let mut a = consensus_accel(own, delayed, spacing, p.gamma, a_max, d_max);
                // the consensus target already keeps the gap to the vehicle it follows
                let other_ahead = match pred {
                    Some(j) if cross_lane || j != target => ahead,
                    _ => f64::INFINITY,
                };
                a = a.min(other_ahead).min(self.stop_bar_cap(i, t)).clamp(-d_max, a_max);
                (a, false)
            }
        }
    }

    /// Fixes, for each vehicle, whether it may pass the non-green interval
    /// that starts at or before `t`.
    fn update_amber_decisions(&mut self, t: f64) {
        let green = self.scenario.signal.phase_at(t) == Phase::Green;
        for veh in &mut self.vehicles {
            if green {
                veh.passes_on_amber = None;
            } else if veh.passes_on_amber.is_none() {
                let d = -veh.x;
                veh.passes_on_amber = Some(d >= 0.0 && veh.v * veh.v > 2.0 * veh.spec.d_max * d);
            }
        }
    }

    /// Largest acceleration that still lets the vehicle either stop at the stop
    /// bar or reach it no earlier than the next green onset, while the signal
    /// is not green. Vehicles that could not stop when the
    /// signal left green, and those past the bar, are not restrained.
    fn stop_bar_cap(&self, i: usize, t: f64) -> f64 {
        let veh = &self.vehicles[i];
        if veh.crossing.is_some() || self.scenario.signal.phase_at(t) == Phase::Green || veh.passes_on_amber == Some(true) {
            return f64::INFINITY;
        }
        let d = -veh.x;
        let b = veh.spec.d_max;
        if d < 0.0 {
            return f64::INFINITY;
        }
        // fastest speed from which braking at `b` step by step still stops short
        let bdt = b * self.dt;
        let room = (d - BAR_STANDOFF).max(0.0);
        let stopping = (bdt * bdt + 2.0 * b * room).sqrt() - bdt;
        // arriving no earlier than the next green needs no restraint
        let next_green = build_green_windows(&self.scenario.signal, t, 2)
            .windows()
            .iter()
            .map(|w| w.start_s)
            .find(|&s| s > t)
            .unwrap_or(f64::INFINITY);
        let v_safe = stopping.max(room / (next_green - t));
        (v_safe - veh.v) / self.dt
    }

    fn start_due_lane_changes(&mut self, t: f64) {
        let d_min = self.scenario.policy.lane_change_gap;
        for i in 0..self.vehicles.len() {
            let Some(ch) = self.vehicles[i].change else { continue };
            if ch.start.is_some() {
                continue;
            }
            let x = self.vehicles[i].x;
            let clear = ch
                .neighbours
                .iter()
                .flatten()
                .all(|&j| (self.vehicles[j].x - x).abs() >= d_min);
            if clear || t - ch.requested >= MAX_LANE_CHANGE_DEFERRAL {
                let veh = &mut self.vehicles[i];
                veh.change = Some(PendingChange { start: Some(t), ..ch });
                veh.mode = Mode::LaneChanging;
                self.lane_change_log.push(LaneChangePlan {
                    vehicle_id: veh.spec.id,
                    from_lane: veh.lane,
                    to_lane: ch.to_lane,
                    start_t: t,
                    duration: self.scenario.policy.lane_change_duration,
                });
            }
        }
    }

    fn record(&mut self, t: f64) {
        for veh in &self.vehicles {
            self.log.rows.push(VehicleState {
                t,
                vehicle_id: veh.spec.id,
                lane: veh.lane,
                x: veh.x,
                v: veh.v,
                a: veh.a,
                mode: veh.mode,
            });
        }
    }

    /// Time in `[t, t + dt]` at which vehicle `i` passes `line`, given its
    /// state before (`x_old`) and after the step.
    fn crossing_in_step(&self, i: usize, line: f64, t: f64, x_old: f64, on_ref_profile: Option<(TrigProfile, f64, f64)>) -> f64 {
        let x_new = self.vehicles[i].x;
        match on_ref_profile {
            Some((profile, t0, x0)) => {
                let (mut lo, mut hi) = (t, t + self.dt);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if x0 + profile.eval(mid - t0).position >= line {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
            // position moves linearly within a step under the integrator
            None => t + self.dt * (line - x_old) / (x_new - x_old),
        }
    }

    fn step(&mut self, k: usize) -> Result<(), EngineError> {
        let dt = self.dt;
        let t = k as f64 * dt;
        let t_next = (k + 1) as f64 * dt;
        self.start_due_lane_changes(t);
        self.commit_ego_plans(t)?;
        self.update_amber_decisions(t);

        let commands: Vec<(f64, bool)> = (0..self.vehicles.len()).map(|i| self.commanded_accel(i, t)).collect();

        let v_lim = self.scenario.speed_limit();
        let trip_end = self.scenario.policy.trip_end;
        for (i, &(a_cmd, stays_on_ref)) in commands.iter().enumerate() {
            let x_old = self.vehicles[i].x;
            let v_old = self.vehicles[i].v;
            let mut on_ref_profile = None;
            {
                let veh = &mut self.vehicles[i];
                match &mut veh.control {
                    Control::Profile {
                        profile,
                        t0,
                        x0,
                        on_reference,
                    } if *on_reference && stays_on_ref && veh.mode != Mode::LaneChanging => {
                        let s = profile.eval(t_next - *t0);
                        veh.a = a_cmd;
                        veh.v = s.speed.clamp(0.0, v_lim);
                        veh.x = *x0 + s.position;
                        on_ref_profile = Some((*profile, *t0, *x0));
                    }
                    other => {
                        if let Control::Profile { on_reference, .. } = other {
                            *on_reference = false;
                            if self.policy == Policy::Ego {
                                *other = Control::Discharge {
                                    v_target: veh.spec.initial_speed,
                                };
                            }
                        }
                        let v_new = (v_old + a_cmd * dt).clamp(0.0, v_lim);
                        veh.a = (v_new - v_old) / dt;
                        veh.v = v_new;
                        veh.x = x_old + v_new * dt;
                    }
                }
            }

            for (line, is_bar) in [(0.0, true), (trip_end, false)] {
                let threshold = line + CROSSING_EPS;
                let done = if is_bar {
                    self.vehicles[i].crossing.is_some()
                } else {
                    self.vehicles[i].trip_end.is_some()
                };
                if !done && x_old < threshold && self.vehicles[i].x >= threshold {
                    let tc = self.crossing_in_step(i, threshold, t, x_old, on_ref_profile);
                    let veh = &mut self.vehicles[i];
                    if is_bar {
                        veh.crossing = Some(tc);
                        veh.mode = Mode::Departed;
                        self.log.crossings.insert(veh.spec.id, tc);
                    } else {
                        veh.trip_end = Some(tc);
                        self.log.trip_end_times.insert(veh.spec.id, tc);
                    }
                }
            }

            let veh = &self.vehicles[i];
            if !(veh.x.is_finite() && veh.v.is_finite() && veh.a.is_finite()) {
                return Err(EngineError::Diverged {
                    id: veh.spec.id,
                    t: t_next,
                    x: veh.x,
                    v: veh.v,
                    a: veh.a,
                });
            }
        }

        for veh in &mut self.vehicles {
            veh.buffer.push(t_next, Kinematics { x: veh.x, v: veh.v });
        }

        // lane changes that end with this step
        let duration = self.scenario.policy.lane_change_duration;
        let mut formed = Vec::new();
        for (i, veh) in self.vehicles.iter_mut().enumerate() {
            if let Some(PendingChange { to_lane, start: Some(s), .. }) = veh.change {
                if t_next >= s + duration - 1e-9 {
                    veh.lane = to_lane;
                    veh.change = None;
                    // formation and approach run together, so forming is immediate
                    veh.mode = if veh.crossing.is_some() { Mode::Departed } else { Mode::EadApproach };
                    formed.push(i);
                }
            }
        }
        for i in formed {
            match self.vehicles[i].control {
                Control::PendingProfile { window } => self.plan_leader(i, window, t_next)?,
                _ => self.capture_gap_error(i, t_next),
            }
        }
        Ok(())
    }

    fn run(&mut self, t_stop: f64) -> Result<(), EngineError> {
        let steps = (t_stop / self.dt).ceil() as usize;
        for k in 0..steps {
            // accelerations are stored on the row of the step they act over
            let t = k as f64 * self.dt;
            let mark = self.log.rows.len();
            self.record(t);
            self.step(k)?;
            for (r, veh) in self.log.rows[mark..].iter_mut().zip(&self.vehicles) {
                r.a = veh.a;
            }
            if self.vehicles.iter().all(|v| v.trip_end.is_some()) {
                self.record((k + 1) as f64 * self.dt);
                return Ok(());
            }
        }
        self.record(steps as f64 * self.dt);
        Ok(())
    }
}
