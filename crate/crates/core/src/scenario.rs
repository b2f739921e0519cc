//! Scenario ingestion: signal plan, road geometry, fleet and policy parameters.
//!
//! Coordinates: the stop bar is position 0 and vehicles approach from negative
//! positions. Scenario documents store distances to the stop bar, which are
//! positive.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TIME_EPS;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("duplicate vehicle id {0}")]
    DuplicateId(VehicleId),
    #[error("vehicles {front} and {back} overlap on lane {lane} (bumper gap {gap:.3} m)")]
    Overlap {
        lane: usize,
        front: VehicleId,
        back: VehicleId,
        gap: f64,
    },
    #[error("malformed scenario document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read scenario `{path}`")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Red,
    Green,
    Yellow,
}

impl Phase {
    fn next(self) -> Phase {
        match self {
            Phase::Red => Phase::Green,
            Phase::Green => Phase::Yellow,
            Phase::Yellow => Phase::Red,
        }
    }
}

/// Fixed-time signal cycling red, green, yellow. The phase `cycle_start_phase`
/// begins at `cycle_offset_s` and the cycle repeats in both directions of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalPlan {
    pub red_s: f64,
    pub green_s: f64,
    pub yellow_s: f64,
    #[serde(default = "default_start_phase")]
    pub cycle_start_phase: Phase,
    #[serde(default)]
    pub cycle_offset_s: f64,
}

fn default_start_phase() -> Phase {
    Phase::Red
}

impl SignalPlan {
    pub fn cycle_length(&self) -> f64 {
        self.red_s + self.green_s + self.yellow_s
    }

    fn duration(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Red => self.red_s,
            Phase::Green => self.green_s,
            Phase::Yellow => self.yellow_s,
        }
    }

    /// Offset of the green onset from the start of a cycle.
    fn green_onset_in_cycle(&self) -> f64 {
        let mut phase = self.cycle_start_phase;
        let mut acc = 0.0;
        while phase != Phase::Green {
            acc += self.duration(phase);
            phase = phase.next();
        }
        acc
    }

    pub fn phase_at(&self, t: f64) -> Phase {
        let mut elapsed = (t - self.cycle_offset_s).rem_euclid(self.cycle_length());
        let mut phase = self.cycle_start_phase;
        loop {
            let d = self.duration(phase);
            if elapsed < d {
                return phase;
            }
            elapsed -= d;
            phase = phase.next();
        }
    }

    /// Start time of the green window with cycle index `k`.
    fn green_start(&self, k: i64) -> f64 {
        self.cycle_offset_s + self.green_onset_in_cycle() + k as f64 * self.cycle_length()
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        for (name, v) in [
            ("signal.red_s", self.red_s),
            ("signal.green_s", self.green_s),
            ("signal.yellow_s", self.yellow_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if !self.cycle_offset_s.is_finite() {
            return Err(invalid("signal.cycle_offset_s", "must be finite"));
        }
        Ok(())
    }
}

/// A passable interval. Arrival at exactly `end_s` still counts as passing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenWindow {
    pub start_s: f64,
    pub end_s: f64,
}

impl GreenWindow {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        debug_assert!(start_s < end_s);
        GreenWindow { start_s, end_s }
    }

    /// Closed containment test `start ≤ t ≤ end`, with `tol` slack on both sides.
    pub fn contains(&self, t: f64, tol: f64) -> bool {
        t >= self.start_s - tol && t <= self.end_s + tol
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Sorted, disjoint green windows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GreenWindowSet(Vec<GreenWindow>);

impl GreenWindowSet {
    pub fn windows(&self) -> &[GreenWindow] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&GreenWindow> {
        self.0.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, GreenWindow> {
        self.0.iter()
    }

    /// Index of the first window that is still open at time `t` (closed end).
    pub fn first_open_at_or_after(&self, t: f64) -> Option<usize> {
        self.0.iter().position(|w| t <= w.end_s + TIME_EPS)
    }
}

impl FromIterator<GreenWindow> for GreenWindowSet {
    fn from_iter<I: IntoIterator<Item = GreenWindow>>(iter: I) -> Self {
        GreenWindowSet(iter.into_iter().collect())
    }
}

/// Green windows available from `t0`: the remainder of the current green (if
/// the signal is green at `t0`) followed by `horizon` full green windows. A
/// current green that starts exactly at `t0` is itself full and counts toward
/// the horizon. Yellow is not passable.
pub fn build_green_windows(plan: &SignalPlan, t0: f64, horizon: usize) -> GreenWindowSet {
    let cycle = plan.cycle_length();
    let onset0 = plan.green_start(0);
    let mut k = ((t0 - onset0) / cycle).floor() as i64;
    // floor() can land one cycle off when t0 sits on a boundary
    while plan.green_start(k) > t0 {
        k -= 1;
    }
    while plan.green_start(k + 1) <= t0 {
        k += 1;
    }

    let mut out = Vec::with_capacity(horizon + 1);
    let start = plan.green_start(k);
    let end = start + plan.green_s;
    let mut full = 0;
    if t0 < end {
        out.push(GreenWindow::new(t0, end));
        // a window entered exactly at its onset is a full window
        if t0 <= start {
            full += 1;
        }
    }
    let mut next = k + 1;
    while full < horizon {
        let s = plan.green_start(next);
        out.push(GreenWindow::new(s, s + plan.green_s));
        next += 1;
        full += 1;
    }
    GreenWindowSet(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadGeometry {
    pub lane_count: usize,
    #[serde(default = "default_comm_range")]
    pub comm_range_m: f64,
    pub speed_limit_mps: f64,
}

fn default_comm_range() -> f64 {
    500.0
}

/// Longitudinal plant coefficients (quasi-steady-state model).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleDynamics {
    pub mass_kg: f64,
    /// Aerodynamic drag coefficient, N·s²/m².
    pub drag_coeff: f64,
    /// Rolling/friction coefficient, N·s/m.
    pub friction_coeff: f64,
    /// Mechanical drag, N.
    pub mech_drag_n: f64,
    pub gear_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSpec {
    pub id: VehicleId,
    pub initial_lane: usize,
    pub initial_speed: f64,
    pub initial_distance: f64,
    pub a_max: f64,
    /// Deceleration magnitude (positive).
    pub d_max: f64,
    pub jerk_max: f64,
    /// GPS antenna to front bumper.
    pub l_front: f64,
    /// GPS antenna to rear bumper.
    pub l_rear: f64,
    pub braking_factor: f64,
    pub dynamics: VehicleDynamics,
}

impl VehicleSpec {
    pub fn length(&self) -> f64 {
        self.l_front + self.l_rear
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Desired time headway under cooperation, s.
    pub headway_coop: f64,
    /// Desired time headway for the ego baseline, s.
    pub headway_ego: f64,
    /// Minimum bumper-to-bumper gap, m.
    pub d_safe: f64,
    /// Actuator plus communication delay, s.
    pub delay: f64,
    /// Consensus damping gain.
    pub gamma: f64,
    /// Minimum distance headway to sequence neighbours for a lane change, m.
    pub lane_change_gap: f64,
    pub coast_speed: f64,
    pub dt: f64,
    /// Number of full green windows considered ahead of the current time.
    pub horizon: usize,
    pub lane_change_duration: f64,
    /// Energy accounting endpoint downstream of the stop bar, m.
    pub trip_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub signal: SignalPlan,
    pub road: RoadGeometry,
    pub fleet: Vec<VehicleSpec>,
    pub policy: PolicyParams,
}

// ---------------------------------------------------------------------------
// Document schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    signal: SignalPlan,
    road: RoadGeometry,
    #[serde(default)]
    policy: PolicyDoc,
    vehicles: Vec<VehicleDoc>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    headway_coop_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    headway_ego_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_safe_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delay_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lane_change_gap_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coast_speed_mps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lane_change_duration_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trip_end_m: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleDoc {
    id: u32,
    lane: usize,
    speed_mps: f64,
    distance_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    a_max_mps2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_max_mps2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jerk_max_mps3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    antenna_to_front_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    antenna_to_rear_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    braking_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mass_kg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drag_coeff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    friction_coeff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mech_drag_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gear_ratio: Option<f64>,
}

pub mod defaults {
    //! Values used when a scenario document omits a field.
    pub const A_MAX: f64 = 3.5;
    pub const D_MAX: f64 = 3.5;
    pub const JERK_MAX: f64 = 2.5;
    pub const L_FRONT: f64 = 3.0;
    pub const L_REAR: f64 = 2.0;
    pub const BRAKING_FACTOR: f64 = 1.0;
    pub const MASS_KG: f64 = 1500.0;
    pub const DRAG_COEFF: f64 = 0.4;
    pub const FRICTION_COEFF: f64 = 0.1;
    pub const MECH_DRAG_N: f64 = 100.0;
    pub const GEAR_RATIO: f64 = 8.0;

    pub const HEADWAY_COOP: f64 = 1.0;
    pub const HEADWAY_EGO: f64 = 2.0;
    pub const D_SAFE: f64 = 2.0;
    pub const DELAY: f64 = 0.06;
    pub const GAMMA: f64 = 1.5;
    pub const LANE_CHANGE_GAP: f64 = 10.0;
    /// Coasting speed as a fraction of the speed limit.
    pub const COAST_FRACTION: f64 = 0.6;
    pub const DT: f64 = 0.1;
    pub const HORIZON: usize = 2;
    pub const LANE_CHANGE_DURATION: f64 = 3.0;
    pub const TRIP_END: f64 = 100.0;
}

fn positive(field: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(field, format!("must be > 0, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(invalid(field, format!("must be >= 0, got {v}")))
    }
}

impl PolicyDoc {
    fn resolve(&self, v_lim: f64) -> Result<PolicyParams, ScenarioError> {
        use defaults as d;
        let coast_speed = self.coast_speed_mps.unwrap_or(d::COAST_FRACTION * v_lim);
        if !(coast_speed > 0.0 && coast_speed <= v_lim) {
            return Err(invalid(
                "policy.coast_speed_mps",
                format!("must lie in (0, speed limit], got {coast_speed}"),
            ));
        }
        let horizon = self.horizon.unwrap_or(d::HORIZON);
        if horizon == 0 {
            return Err(invalid("policy.horizon", "must be >= 1"));
        }
        Ok(PolicyParams {
            headway_coop: positive(
                "policy.headway_coop_s",
                self.headway_coop_s.unwrap_or(d::HEADWAY_COOP),
            )?,
            headway_ego: positive(
                "policy.headway_ego_s",
                self.headway_ego_s.unwrap_or(d::HEADWAY_EGO),
            )?,
            d_safe: non_negative("policy.d_safe_m", self.d_safe_m.unwrap_or(d::D_SAFE))?,
            delay: non_negative("policy.delay_s", self.delay_s.unwrap_or(d::DELAY))?,
            gamma: positive("policy.gamma", self.gamma.unwrap_or(d::GAMMA))?,
            lane_change_gap: non_negative(
                "policy.lane_change_gap_m",
                self.lane_change_gap_m.unwrap_or(d::LANE_CHANGE_GAP),
            )?,
            coast_speed,
            dt: positive("policy.dt_s", self.dt_s.unwrap_or(d::DT))?,
            horizon,
            lane_change_duration: positive(
                "policy.lane_change_duration_s",
                self.lane_change_duration_s
                    .unwrap_or(d::LANE_CHANGE_DURATION),
            )?,
            trip_end: non_negative("policy.trip_end_m", self.trip_end_m.unwrap_or(d::TRIP_END))?,
        })
    }

    fn from_params(p: &PolicyParams) -> Self {
        PolicyDoc {
            headway_coop_s: Some(p.headway_coop),
            headway_ego_s: Some(p.headway_ego),
            d_safe_m: Some(p.d_safe),
            delay_s: Some(p.delay),
            gamma: Some(p.gamma),
            lane_change_gap_m: Some(p.lane_change_gap),
            coast_speed_mps: Some(p.coast_speed),
            dt_s: Some(p.dt),
            horizon: Some(p.horizon),
            lane_change_duration_s: Some(p.lane_change_duration),
            trip_end_m: Some(p.trip_end),
        }
    }
}

impl VehicleDoc {
    fn resolve(&self, road: &RoadGeometry) -> Result<VehicleSpec, ScenarioError> {
        use defaults as d;
        let prefix = format!("vehicles[id={}]", self.id);
        let f = |name: &str| format!("{prefix}.{name}");
        if self.lane >= road.lane_count {
            return Err(invalid(
                f("lane"),
                format!("lane {} outside 0..{}", self.lane, road.lane_count),
            ));
        }
        if !(self.speed_mps.is_finite()
            && self.speed_mps >= 0.0
            && self.speed_mps <= road.speed_limit_mps)
        {
            return Err(invalid(
                f("initial_speed (speed_mps)"),
                format!(
                    "must lie in [0, {}], got {}",
                    road.speed_limit_mps, self.speed_mps
                ),
            ));
        }
        let initial_distance = positive(&f("initial_distance (distance_m)"), self.distance_m)?;
        Ok(VehicleSpec {
            id: VehicleId(self.id),
            initial_lane: self.lane,
            initial_speed: self.speed_mps,
            initial_distance,
            a_max: positive(&f("a_max_mps2"), self.a_max_mps2.unwrap_or(d::A_MAX))?,
            d_max: positive(&f("d_max_mps2"), self.d_max_mps2.unwrap_or(d::D_MAX))?,
            jerk_max: positive(&f("jerk_max_mps3"), self.jerk_max_mps3.unwrap_or(d::JERK_MAX))?,
            l_front: non_negative(
                &f("antenna_to_front_m"),
                self.antenna_to_front_m.unwrap_or(d::L_FRONT),
            )?,
            l_rear: non_negative(
                &f("antenna_to_rear_m"),
                self.antenna_to_rear_m.unwrap_or(d::L_REAR),
            )?,
            braking_factor: positive(
                &f("braking_factor"),
                self.braking_factor.unwrap_or(d::BRAKING_FACTOR),
            )?,
            dynamics: VehicleDynamics {
                mass_kg: positive(&f("mass_kg"), self.mass_kg.unwrap_or(d::MASS_KG))?,
                drag_coeff: non_negative(&f("drag_coeff"), self.drag_coeff.unwrap_or(d::DRAG_COEFF))?,
                friction_coeff: non_negative(
                    &f("friction_coeff"),
                    self.friction_coeff.unwrap_or(d::FRICTION_COEFF),
                )?,
                mech_drag_n: non_negative(
                    &f("mech_drag_n"),
                    self.mech_drag_n.unwrap_or(d::MECH_DRAG_N),
                )?,
                gear_ratio: positive(&f("gear_ratio"), self.gear_ratio.unwrap_or(d::GEAR_RATIO))?,
            },
        })
    }

    fn from_spec(v: &VehicleSpec) -> Self {
        VehicleDoc {
            id: v.id.0,
            lane: v.initial_lane,
            speed_mps: v.initial_speed,
            distance_m: v.initial_distance,
            a_max_mps2: Some(v.a_max),
            d_max_mps2: Some(v.d_max),
            jerk_max_mps3: Some(v.jerk_max),
            antenna_to_front_m: Some(v.l_front),
            antenna_to_rear_m: Some(v.l_rear),
            braking_factor: Some(v.braking_factor),
            mass_kg: Some(v.dynamics.mass_kg),
            drag_coeff: Some(v.dynamics.drag_coeff),
            friction_coeff: Some(v.dynamics.friction_coeff),
            mech_drag_n: Some(v.dynamics.mech_drag_n),
            gear_ratio: Some(v.dynamics.gear_ratio),
        }
    }
}

/// Parses and validates a scenario document (JSON).
pub fn parse_scenario(document: &str) -> Result<Scenario, ScenarioError> {
    let doc: ScenarioDoc = serde_json::from_str(document)?;
    Scenario::from_doc(doc)
}

impl Scenario {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_scenario(&text)
    }

    fn from_doc(doc: ScenarioDoc) -> Result<Scenario, ScenarioError> {
        doc.signal.validate()?;
        let road = doc.road;
        if road.lane_count < 1 {
            return Err(invalid("road.lane_count", "must be >= 1"));
        }
        positive("road.comm_range_m", road.comm_range_m)?;
        positive("road.speed_limit_mps", road.speed_limit_mps)?;
        let policy = doc.policy.resolve(road.speed_limit_mps)?;

        let mut seen = HashSet::new();
        let mut fleet = Vec::with_capacity(doc.vehicles.len());
        for v in &doc.vehicles {
            let spec = v.resolve(&road)?;
            if !seen.insert(spec.id) {
                return Err(ScenarioError::DuplicateId(spec.id));
            }
            fleet.push(spec);
        }
        check_overlaps(&fleet)?;

        Ok(Scenario {
            signal: doc.signal,
            road,
            fleet,
            policy,
        })
    }

    /// Serializes to a document with every default made explicit.
    pub fn to_json(&self) -> String {
        let doc = ScenarioDoc {
            signal: self.signal.clone(),
            road: self.road.clone(),
            policy: PolicyDoc::from_params(&self.policy),
            vehicles: self.fleet.iter().map(VehicleDoc::from_spec).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("scenario document serializes")
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleSpec> {
        self.fleet.iter().find(|v| v.id == id)
    }

    pub fn speed_limit(&self) -> f64 {
        self.road.speed_limit_mps
    }

    /// Green windows from `t0` using the scenario's horizon.
    pub fn green_windows(&self, t0: f64) -> GreenWindowSet {
        build_green_windows(&self.signal, t0, self.policy.horizon)
    }
}

fn check_overlaps(fleet: &[VehicleSpec]) -> Result<(), ScenarioError> {
    let mut by_lane: BTreeMap<usize, Vec<&VehicleSpec>> = BTreeMap::new();
    for v in fleet {
        by_lane.entry(v.initial_lane).or_default().push(v);
    }
    for (lane, mut vs) in by_lane {
        vs.sort_by(|a, b| a.initial_distance.total_cmp(&b.initial_distance));
        for pair in vs.windows(2) {
            let (front, back) = (pair[0], pair[1]);
            let gap = back.initial_distance - front.initial_distance - back.l_front - front.l_rear;
            if gap <= 0.0 {
                return Err(ScenarioError::Overlap {
                    lane,
                    front: front.id,
                    back: back.id,
                    gap,
                });
            }
        }
    }
    Ok(())
}

/// The bundled fixture encoding the evaluation tables (16 vehicles, 2 lanes).
pub const PAPER_TABLES_JSON: &str = include_str!("../fixtures/paper_tables.json");

pub fn paper_tables() -> Scenario {
    parse_scenario(PAPER_TABLES_JSON).expect("bundled fixture is valid")
}
