//! Intra-cluster lane and slot assignment.
//!
//! Lanes are treated as identical parallel machines with release times: every
//! vehicle is a job whose release is its earliest stop-bar arrival, and lane
//! slots are spaced by a minimum headway. The heuristic is shortest-processing-
//! time list scheduling; an exhaustive branch-and-bound search serves as the
//! optimality oracle for small instances.

use serde::Serialize;
use thiserror::Error;

use crate::scenario::{GreenWindow, GreenWindowSet, VehicleId};
use crate::TIME_EPS;

/// Largest cluster the exhaustive search accepts.
pub const BRUTE_FORCE_LIMIT: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequencingError {
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("brute-force search refuses {0} vehicles (limit {BRUTE_FORCE_LIMIT})")]
    TooLarge(usize),
    #[error("no assignment satisfies the lane-change distance constraint")]
    Infeasible,
    #[error("vehicle {id} is on lane {lane} but only {lane_count} lanes exist")]
    LaneOutOfRange {
        id: VehicleId,
        lane: usize,
        lane_count: usize,
    },
}

/// One vehicle as seen by the sequencer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub vehicle_id: VehicleId,
    pub lane: usize,
    /// Current distance to the stop bar (m).
    pub distance: f64,
    /// Earliest absolute arrival time (s).
    pub earliest: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SequencingParams {
    pub lane_count: usize,
    /// Minimum same-lane headway between consecutive slots (s).
    pub t_min_h: f64,
    /// Minimum distance separation for a lane change against its sequence neighbours (m).
    pub d_min_h: f64,
    /// When false every vehicle keeps its lane.
    pub allow_lane_change: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotAssignment {
    pub vehicle_id: VehicleId,
    pub lane: usize,
    /// 1-based position within the lane.
    pub position: usize,
    pub slot_time: f64,
    pub lane_change_required: bool,
    /// Set when no admissible lane passed the distance test and the vehicle was
    /// kept on its own lane regardless.
    pub constraint_relaxed: bool,
    pub earliest: f64,
    pub initial_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequencedCluster {
    pub window: GreenWindow,
    /// Sorted by lane, then position.
    pub assignments: Vec<SlotAssignment>,
    pub leader_id: VehicleId,
    /// Position-1 vehicle of every occupied lane, in lane order.
    pub string_leader_ids: Vec<VehicleId>,
    pub objective: f64,
}

impl SequencedCluster {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn assignment(&self, id: VehicleId) -> Option<&SlotAssignment> {
        self.assignments.iter().find(|a| a.vehicle_id == id)
    }

    /// Vehicle ids on `lane` in slot order.
    pub fn lane_sequence(&self, lane: usize) -> Vec<VehicleId> {
        self.assignments
            .iter()
            .filter(|a| a.lane == lane)
            .map(|a| a.vehicle_id)
            .collect()
    }

    /// Occupied lanes in ascending order.
    pub fn lanes(&self) -> Vec<usize> {
        let mut lanes: Vec<usize> = self.assignments.iter().map(|a| a.lane).collect();
        lanes.dedup();
        lanes
    }

    pub fn member_ids(&self) -> Vec<VehicleId> {
        self.assignments.iter().map(|a| a.vehicle_id).collect()
    }

    /// The assignment directly ahead of `id` on its lane, if any.
    pub fn predecessor(&self, id: VehicleId) -> Option<&SlotAssignment> {
        let a = self.assignment(id)?;
        self.assignments
            .iter()
            .find(|b| b.lane == a.lane && b.position + 1 == a.position)
    }
}

#[derive(Debug, Clone, Copy)]
struct LaneTail {
    slot: f64,
    distance: f64,
    changed: bool,
}

fn admissible(c: &Candidate, lane: usize, params: &SequencingParams) -> bool {
    if lane == c.lane {
        true
    } else {
        params.allow_lane_change && lane.abs_diff(c.lane) == 1
    }
}

fn next_slot(c: &Candidate, tail: Option<LaneTail>, window: &GreenWindow, t_min_h: f64) -> f64 {
    let after = tail.map_or(f64::NEG_INFINITY, |t| t.slot + t_min_h);
    window.start_s.max(after).max(c.earliest)
}

/// Distance test between an appended vehicle and the current tail of the lane.
/// It applies whenever either vehicle of the pair changes lanes.
fn distance_ok(c: &Candidate, lane: usize, tail: Option<LaneTail>, d_min_h: f64) -> bool {
    match tail {
        None => true,
        Some(t) if lane != c.lane || t.changed => (c.distance - t.distance).abs() >= d_min_h,
        Some(_) => true,
    }
}

fn check_lanes(candidates: &[Candidate], params: &SequencingParams) -> Result<(), SequencingError> {
    if candidates.is_empty() {
        return Err(SequencingError::EmptyCluster);
    }
    for c in candidates {
        if c.lane >= params.lane_count {
            return Err(SequencingError::LaneOutOfRange {
                id: c.vehicle_id,
                lane: c.lane,
                lane_count: params.lane_count,
            });
        }
    }
    Ok(())
}

fn by_earliest(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| {
        a.earliest
            .total_cmp(&b.earliest)
            .then(a.vehicle_id.cmp(&b.vehicle_id))
    });
    sorted
}

type Placement = (usize, f64, bool, Candidate);

/// Lane choice for `order[k]` given the current lane tails.
///
/// The smallest next slot wins. Lanes tied on slot are compared by the total
/// objective of finishing the schedule greedily from each of them when
/// `lookahead` is set, then by how many unscheduled vehicles could still use the
/// lane, then by index.
fn choose_lane(
    order: &[Candidate],
    k: usize,
    tails: &[Option<LaneTail>],
    window: &GreenWindow,
    params: &SequencingParams,
    lookahead: bool,
) -> (usize, f64, bool) {
    let c = &order[k];
    let rest = &order[k + 1..];
    let mut options: Vec<(f64, usize)> = (0..params.lane_count)
        .filter(|&lane| admissible(c, lane, params) && distance_ok(c, lane, tails[lane], params.d_min_h))
        .map(|lane| (next_slot(c, tails[lane], window, params.t_min_h), lane))
        .collect();
    let Some(min_slot) = options.iter().map(|o| o.0).min_by(f64::total_cmp) else {
        return (c.lane, next_slot(c, tails[c.lane], window, params.t_min_h), true);
    };
    options.retain(|o| o.0 <= min_slot + TIME_EPS);

    let score = |lane: usize| -> (f64, usize) {
        let completion = if lookahead && options.len() > 1 {
            let mut t = tails.to_vec();
            t[lane] = Some(LaneTail {
                slot: options.iter().find(|o| o.1 == lane).unwrap().0,
                distance: c.distance,
                changed: lane != c.lane,
            });
            complete(order, k + 1, &mut t, window, params)
        } else {
            0.0
        };
        let demand = rest.iter().filter(|r| admissible(r, lane, params)).count();
        (completion, demand)
    };
    let mut best: Option<((f64, usize), f64, usize)> = None;
    for &(slot, lane) in &options {
        let sc = score(lane);
        let better = match best {
            None => true,
            Some(((bc, bd), _, _)) => sc.0 < bc - TIME_EPS || ((sc.0 - bc).abs() <= TIME_EPS && sc.1 < bd),
        };
        if better {
            best = Some((sc, slot, lane));
        }
    }
    let (_, slot, lane) = best.expect("at least one option");
    (lane, slot, false)
}

fn place(order: &[Candidate], k: usize, tails: &mut [Option<LaneTail>], lane: usize, slot: f64) {
    tails[lane] = Some(LaneTail {
        slot,
        distance: order[k].distance,
        changed: lane != order[k].lane,
    });
}

/// Objective of scheduling `order[from..]` greedily without lookahead.
fn complete(
    order: &[Candidate],
    from: usize,
    tails: &mut [Option<LaneTail>],
    window: &GreenWindow,
    params: &SequencingParams,
) -> f64 {
    let mut sum = 0.0;
    for k in from..order.len() {
        let (lane, slot, _) = choose_lane(order, k, tails, window, params, false);
        place(order, k, tails, lane, slot);
        sum += slot;
    }
    sum
}

/// Shortest-processing-time list scheduling.
///
/// Vehicles are taken in ascending earliest arrival and appended to the
/// admissible lane with the smallest next slot. When several lanes offer the
/// same slot, each is tried by completing the schedule greedily and the one
/// with the lower total wins; remaining ties go to the lane fewer unscheduled
/// vehicles can use, then to the lowest index. A vehicle with no lane passing
/// the distance test stays on its own lane and is flagged.
pub fn spt_sequence(
    candidates: &[Candidate],
    window: GreenWindow,
    params: &SequencingParams,
) -> Result<SequencedCluster, SequencingError> {
    check_lanes(candidates, params)?;
    let order = by_earliest(candidates);
    let mut tails: Vec<Option<LaneTail>> = vec![None; params.lane_count];
    let mut out: Vec<Placement> = Vec::with_capacity(order.len());
    for k in 0..order.len() {
        let (lane, slot, relaxed) = choose_lane(&order, k, &tails, &window, params, true);
        place(&order, k, &mut tails, lane, slot);
        out.push((lane, slot, relaxed, order[k]));
    }
    Ok(assemble(window, out))
}

fn assemble(window: GreenWindow, placed: Vec<Placement>) -> SequencedCluster {
    let mut placed = placed;
    // stable: insertion order within a lane is slot order
    placed.sort_by_key(|p| p.0);
    let mut assignments = Vec::with_capacity(placed.len());
    let mut lane_prev = usize::MAX;
    let mut q = 0;
    for (lane, slot, relaxed, c) in placed {
        if lane != lane_prev {
            q = 0;
            lane_prev = lane;
        }
        q += 1;
        assignments.push(SlotAssignment {
            vehicle_id: c.vehicle_id,
            lane,
            position: q,
            slot_time: slot,
            lane_change_required: lane != c.lane,
            constraint_relaxed: relaxed,
            earliest: c.earliest,
            initial_distance: c.distance,
        });
    }
    finish(window, assignments).expect("non-empty by construction")
}

fn finish(window: GreenWindow, assignments: Vec<SlotAssignment>) -> Result<SequencedCluster, SequencingError> {
    let objective = assignments.iter().map(|a| a.slot_time).sum();
    let placeholder = SequencedCluster {
        window,
        assignments,
        leader_id: VehicleId(0),
        string_leader_ids: Vec::new(),
        objective,
    };
    select_leaders(placeholder)
}

/// Re-derives the cluster leader (smallest earliest arrival, ties by id) and the
/// per-lane string leaders.
pub fn select_leaders(mut seq: SequencedCluster) -> Result<SequencedCluster, SequencingError> {
    let leader = seq
        .assignments
        .iter()
        .min_by(|a, b| {
            a.earliest
                .total_cmp(&b.earliest)
                .then(a.vehicle_id.cmp(&b.vehicle_id))
        })
        .ok_or(SequencingError::EmptyCluster)?;
    seq.leader_id = leader.vehicle_id;
    seq.string_leader_ids = seq
        .assignments
        .iter()
        .filter(|a| a.position == 1)
        .map(|a| a.vehicle_id)
        .collect();
    Ok(seq)
}

/// Drops every member whose slot is after the window end. Slots increase along
/// a lane, so removal always takes a lane suffix. Returns the kept cluster and
/// the removed ids in slot order.
pub fn truncate_overflow(
    seq: SequencedCluster,
) -> Result<(SequencedCluster, Vec<VehicleId>), SequencingError> {
    let end = seq.window.end_s;
    let (keep, drop): (Vec<SlotAssignment>, Vec<SlotAssignment>) = seq
        .assignments
        .into_iter()
        .partition(|a| a.slot_time <= end + TIME_EPS);
    let mut drop = drop;
    drop.sort_by(|a, b| {
        a.slot_time
            .total_cmp(&b.slot_time)
            .then(a.vehicle_id.cmp(&b.vehicle_id))
    });
    let overflow = drop.into_iter().map(|a| a.vehicle_id).collect();
    let kept = finish(seq.window, keep)?;
    Ok((kept, overflow))
}

struct Search<'a> {
    cands: &'a [Candidate],
    window: GreenWindow,
    params: &'a SequencingParams,
    best_obj: f64,
    best: Option<Vec<(usize, f64, bool, Candidate)>>,
    stack: Vec<(usize, f64, bool, Candidate)>,
}

impl Search<'_> {
    fn bound(&self, remaining: u32) -> f64 {
        (0..self.cands.len())
            .filter(|i| remaining & (1 << i) != 0)
            .map(|i| self.cands[i].earliest.max(self.window.start_s))
            .sum()
    }

    fn run(&mut self, lane: usize, tail: Option<LaneTail>, remaining: u32, obj: f64) {
        if remaining == 0 {
            if obj < self.best_obj - TIME_EPS {
                self.best_obj = obj;
                self.best = Some(self.stack.clone());
            }
            return;
        }
        if lane >= self.params.lane_count || obj + self.bound(remaining) >= self.best_obj - TIME_EPS {
            return;
        }
        for i in 0..self.cands.len() {
            if remaining & (1 << i) == 0 {
                continue;
            }
            let c = self.cands[i];
            if !admissible(&c, lane, self.params) || !distance_ok(&c, lane, tail, self.params.d_min_h) {
                continue;
            }
            let slot = next_slot(&c, tail, &self.window, self.params.t_min_h);
            self.stack.push((lane, slot, false, c));
            let next_tail = Some(LaneTail {
                slot,
                distance: c.distance,
                changed: lane != c.lane,
            });
            self.run(lane, next_tail, remaining & !(1 << i), obj + slot);
            self.stack.pop();
        }
        // close this lane and continue with the next
        self.run(lane + 1, None, remaining, obj);
    }
}

/// Exhaustive minimum-objective search over lane memberships and orders.
///
/// Each lane is filled in turn with an ordered subset of the vehicles still
/// unplaced, so every distinct assignment is visited once. Branches whose
/// partial objective plus the sum of remaining release times cannot improve the
/// incumbent are pruned.
pub fn brute_force_sequence(
    candidates: &[Candidate],
    window: GreenWindow,
    params: &SequencingParams,
) -> Result<SequencedCluster, SequencingError> {
    check_lanes(candidates, params)?;
    if candidates.len() > BRUTE_FORCE_LIMIT {
        return Err(SequencingError::TooLarge(candidates.len()));
    }
    let cands = by_earliest(candidates);
    let mut search = Search {
        cands: &cands,
        window,
        params,
        best_obj: f64::INFINITY,
        best: None,
        stack: Vec::new(),
    };
    let all = (1u32 << cands.len()) - 1;
    search.run(0, None, all, 0.0);
    let placed = search.best.ok_or(SequencingError::Infeasible)?;
    Ok(assemble(window, placed))
}

/// Outcome of sequencing a whole fleet across successive green windows.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ClusterPlan {
    pub clusters: Vec<SequencedCluster>,
    /// Vehicles that did not fit in any available window.
    pub unscheduled: Vec<VehicleId>,
}

impl ClusterPlan {
    /// The cluster containing `id` and its index.
    pub fn cluster_of(&self, id: VehicleId) -> Option<(usize, &SequencedCluster)> {
        self.clusters
            .iter()
            .enumerate()
            .find(|(_, c)| c.assignment(id).is_some())
    }
}

/// Clusters by window, sequences each cluster with [`spt_sequence`], truncates
/// it to its window and carries the overflow into the following window.
pub fn sequence_clusters(
    candidates: &[Candidate],
    windows: &GreenWindowSet,
    params: &SequencingParams,
) -> Result<ClusterPlan, SequencingError> {
    let mut pending: Vec<Vec<Candidate>> = vec![Vec::new(); windows.len()];
    let mut plan = ClusterPlan::default();
    for c in by_earliest(candidates) {
        match windows.first_open_at_or_after(c.earliest) {
            Some(i) => pending[i].push(c),
            None => plan.unscheduled.push(c.vehicle_id),
        }
    }

    let mut carry: Vec<Candidate> = Vec::new();
    for (i, window) in windows.iter().enumerate() {
        let mut members = std::mem::take(&mut carry);
        members.extend(pending[i].iter().copied());
        if members.is_empty() {
            continue;
        }
        let seq = spt_sequence(&members, *window, params)?;
        let (kept, overflow) = truncate_overflow(seq)?;
        plan.clusters.push(kept);
        carry = members
            .into_iter()
            .filter(|m| overflow.contains(&m.vehicle_id))
            .collect();
    }
    let mut late: Vec<VehicleId> = carry.iter().map(|c| c.vehicle_id).collect();
    late.append(&mut plan.unscheduled);
    plan.unscheduled = late;
    Ok(plan)
}

/// First-come sequencing that keeps every vehicle in its lane and in its
/// physical order, for vehicles that do not cooperate.
///
/// Along each lane, nearest vehicle first, a vehicle's slot is the later of its
/// own `earliest` time and the predecessor's slot plus `t_min_h`. A slot that
/// misses the end of its window moves to the start of the next window. The
/// result is grouped into one cluster per window.
pub fn lane_order_sequence(
    candidates: &[Candidate],
    windows: &GreenWindowSet,
    params: &SequencingParams,
) -> Result<ClusterPlan, SequencingError> {
    check_lanes(candidates, params)?;
    let mut per_window: Vec<Vec<(usize, f64, bool, Candidate)>> = vec![Vec::new(); windows.len()];
    let mut plan = ClusterPlan::default();

    for lane in 0..params.lane_count {
        let mut on_lane: Vec<Candidate> = candidates.iter().filter(|c| c.lane == lane).copied().collect();
        on_lane.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        let mut prev: Option<f64> = None;
        for c in on_lane {
            let mut t = prev.map_or(c.earliest, |p| c.earliest.max(p + params.t_min_h));
            let Some(mut w) = windows.first_open_at_or_after(t) else {
                plan.unscheduled.push(c.vehicle_id);
                continue;
            };
            t = t.max(windows.windows()[w].start_s);
            if t > windows.windows()[w].end_s + TIME_EPS {
                w += 1;
                match windows.get(w) {
                    Some(next) => t = next.start_s,
                    None => {
                        plan.unscheduled.push(c.vehicle_id);
                        continue;
                    }
                }
            }
            prev = Some(t);
            per_window[w].push((lane, t, false, c));
        }
    }

    for (i, placed) in per_window.into_iter().enumerate() {
        if !placed.is_empty() {
            plan.clusters.push(assemble(windows.windows()[i], placed));
        }
    }
    Ok(plan)
}
