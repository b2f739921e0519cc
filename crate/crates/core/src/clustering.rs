//! Earliest-arrival estimation and initial clustering by green window.

use serde::Serialize;

use crate::scenario::{GreenWindow, GreenWindowSet, VehicleId};
use crate::TIME_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ArrivalBranch {
    /// The stop bar is reached before the speed limit (`d_0 < d_acc`).
    BelowLimit,
    /// The vehicle accelerates to the speed limit and cruises (`d_0 ≥ d_acc`).
    ReachesLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArrivalEstimate {
    pub vehicle_id: VehicleId,
    pub d_acc: f64,
    /// Earliest time-to-arrival from `t0`.
    pub time_to_arrival: f64,
    /// Earliest absolute arrival time.
    pub arrival_time: f64,
    pub branch: ArrivalBranch,
}

/// Distance needed to accelerate from `v_i` to `v_lim` at `a_max`.
pub fn accel_distance(v_i: f64, v_lim: f64, a_max: f64) -> f64 {
    (v_lim * v_lim - v_i * v_i) / (2.0 * a_max)
}

/// Earliest arrival at the stop bar when accelerating at `a_max` up to the
/// speed limit and cruising from there.
pub fn earliest_arrival(
    vehicle_id: VehicleId,
    v_i: f64,
    d_0: f64,
    v_lim: f64,
    a_max: f64,
    t0: f64,
) -> ArrivalEstimate {
    let d_acc = accel_distance(v_i, v_lim, a_max);
    let (t_e, branch) = if d_0 < d_acc {
        (
            (-v_i + (v_i * v_i + 2.0 * a_max * d_0).sqrt()) / a_max,
            ArrivalBranch::BelowLimit,
        )
    } else {
        (
            ((v_lim - v_i).powi(2) + 2.0 * a_max * d_0) / (2.0 * a_max * v_lim),
            ArrivalBranch::ReachesLimit,
        )
    };
    ArrivalEstimate {
        vehicle_id,
        d_acc,
        time_to_arrival: t_e,
        arrival_time: t0 + t_e,
        branch,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialCluster {
    pub window: GreenWindow,
    /// Index of `window` in the window set it was drawn from.
    pub window_index: usize,
    /// Members sorted by earliest arrival (ties by id).
    pub member_ids: Vec<VehicleId>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ClusterAssignment {
    pub clusters: Vec<InitialCluster>,
    /// Vehicles whose earliest arrival is past the last window.
    pub overflow: Vec<VehicleId>,
}

/// Maps each vehicle to the first window whose (closed) end is not before its
/// earliest arrival. A vehicle whose earliest arrival falls in red or yellow
/// therefore joins the next green. Only non-empty clusters are returned.
pub fn assign_initial_clusters(
    estimates: &[ArrivalEstimate],
    windows: &GreenWindowSet,
) -> ClusterAssignment {
    let mut sorted: Vec<&ArrivalEstimate> = estimates.iter().collect();
    sorted.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then(a.vehicle_id.cmp(&b.vehicle_id))
    });

    let mut members: Vec<Vec<VehicleId>> = vec![Vec::new(); windows.len()];
    let mut overflow = Vec::new();
    for est in sorted {
        match windows.first_open_at_or_after(est.arrival_time) {
            Some(i) => members[i].push(est.vehicle_id),
            None => overflow.push(est.vehicle_id),
        }
    }
    let clusters = members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(i, member_ids)| InitialCluster {
            window: windows.windows()[i],
            window_index: i,
            member_ids,
        })
        .collect();
    ClusterAssignment { clusters, overflow }
}

/// True if `t` is no later than the window end (closed test).
pub fn fits_window(t: f64, window: &GreenWindow) -> bool {
    t <= window.end_s + TIME_EPS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_green_windows, paper_tables};
    use approx::assert_abs_diff_eq;

    /// Constant `a_max` until `v_lim`, then cruise, integrated at a fine step.
    fn integrate_arrival(v_i: f64, d_0: f64, v_lim: f64, a_max: f64) -> f64 {
        let dt = 1e-4;
        let (mut t, mut x, mut v) = (0.0, 0.0, v_i);
        loop {
            let a = if v < v_lim { a_max } else { 0.0 };
            let v_next = (v + a * dt).min(v_lim);
            let x_next = x + 0.5 * (v + v_next) * dt;
            if x_next >= d_0 {
                // sub-step crossing by linear interpolation
                return t + dt * (d_0 - x) / (x_next - x);
            }
            t += dt;
            x = x_next;
            v = v_next;
        }
    }

    #[test]
    fn accel_distance_examples() {
        assert_abs_diff_eq!(accel_distance(13.41, 17.88, 3.5), 19.981, epsilon = 5e-4);
        assert_eq!(accel_distance(17.88, 17.88, 3.5), 0.0);
        assert_abs_diff_eq!(accel_distance(0.0, 17.88, 3.5), 45.671, epsilon = 5e-4);
    }

    #[test]
    fn accel_distance_matches_integration() {
        for v_i in [0.0, 5.0, 13.41] {
            let dt = 1e-4;
            let (mut x, mut v): (f64, f64) = (0.0, v_i);
            loop {
                let v_next = v + 3.5 * dt;
                if v_next >= 17.88 {
                    // partial final step up to the limit
                    x += 0.5 * (v + 17.88) * (17.88 - v) / 3.5;
                    break;
                }
                x += 0.5 * (v + v_next) * dt;
                v = v_next;
            }
            assert_abs_diff_eq!(accel_distance(v_i, 17.88, 3.5), x, epsilon = 1e-3);
        }
    }

    #[test]
    fn earliest_arrival_examples() {
        let e = earliest_arrival(VehicleId(1), 13.41, 300.0, 17.88, 3.5, 0.0);
        assert_eq!(e.branch, ArrivalBranch::ReachesLimit);
        assert_abs_diff_eq!(e.time_to_arrival, 16.938, epsilon = 1e-3);
        assert_abs_diff_eq!(
            e.time_to_arrival,
            integrate_arrival(13.41, 300.0, 17.88, 3.5),
            epsilon = 1e-3
        );

        let e = earliest_arrival(VehicleId(16), 13.30, 700.0, 17.88, 3.5, 0.0);
        assert_abs_diff_eq!(e.time_to_arrival, 39.32, epsilon = 5e-3);

        let e = earliest_arrival(VehicleId(0), 17.88, 178.8, 17.88, 3.5, 0.0);
        assert_abs_diff_eq!(e.time_to_arrival, 10.0, epsilon = 1e-12);

        let e = earliest_arrival(VehicleId(0), 10.0, 20.0, 17.88, 3.5, 2.0);
        assert_eq!(e.branch, ArrivalBranch::BelowLimit);
        assert_abs_diff_eq!(e.time_to_arrival, (-10.0 + 240f64.sqrt()) / 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(e.time_to_arrival, 1.569, epsilon = 1e-3);
        assert_abs_diff_eq!(e.arrival_time, 2.0 + e.time_to_arrival, epsilon = 1e-12);
        assert_abs_diff_eq!(
            e.time_to_arrival,
            integrate_arrival(10.0, 20.0, 17.88, 3.5),
            epsilon = 1e-3
        );
    }

    fn fixture_estimates() -> Vec<ArrivalEstimate> {
        let s = paper_tables();
        s.fleet
            .iter()
            .map(|v| earliest_arrival(v.id, v.initial_speed, v.initial_distance, 17.88, v.a_max, 0.0))
            .collect()
    }

    #[test]
    fn fixture_clusters() {
        let windows = build_green_windows(&paper_tables().signal, 0.0, 2);
        let a = assign_initial_clusters(&fixture_estimates(), &windows);
        assert_eq!(a.clusters.len(), 2);
        let mut first: Vec<u32> = a.clusters[0].member_ids.iter().map(|v| v.0).collect();
        first.sort();
        assert_eq!(first, (1..=15).collect::<Vec<_>>());
        assert_eq!(a.clusters[1].member_ids, vec![VehicleId(16)]);
        assert!(a.overflow.is_empty());
        // members ordered by earliest arrival, vehicle 1 first
        assert_eq!(a.clusters[0].member_ids[0], VehicleId(1));
    }

    #[test]
    fn empty_and_single() {
        let windows = build_green_windows(&paper_tables().signal, 0.0, 2);
        assert!(assign_initial_clusters(&[], &windows).clusters.is_empty());

        let est = ArrivalEstimate {
            vehicle_id: VehicleId(7),
            d_acc: 0.0,
            time_to_arrival: 30.0,
            arrival_time: 30.0,
            branch: ArrivalBranch::ReachesLimit,
        };
        let a = assign_initial_clusters(&[est], &windows);
        assert_eq!(a.clusters.len(), 1);
        assert_eq!(a.clusters[0].window, GreenWindow::new(27.0, 35.0));
    }

    #[test]
    fn late_vehicle_overflows() {
        let windows = build_green_windows(&paper_tables().signal, 0.0, 1);
        let est = ArrivalEstimate {
            vehicle_id: VehicleId(3),
            d_acc: 0.0,
            time_to_arrival: 40.0,
            arrival_time: 40.0,
            branch: ArrivalBranch::ReachesLimit,
        };
        let a = assign_initial_clusters(&[est], &windows);
        assert!(a.clusters.is_empty());
        assert_eq!(a.overflow, vec![VehicleId(3)]);
    }
}
