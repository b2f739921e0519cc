//! Throughput, surrogate energy and policy comparison from trajectory logs.
//!
//! Energy uses a VT-Micro style regression: the fuel rate is the exponential of
//! a bivariate cubic polynomial in speed (km/h) and acceleration (km/h/s), with
//! one coefficient table for acceleration and one for deceleration. Coefficients
//! are plain data and can be loaded from JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{TrajectoryLog, VehicleState};
use crate::scenario::{GreenWindow, VehicleId};

const MPS_TO_KMH: f64 = 3.6;

/// Tolerance on window bounds when counting crossings, absorbing the error of
/// interpolated crossing times.
pub const WINDOW_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("energy model is invalid: {0}")]
    InvalidModel(String),
    #[error("energy model could not be parsed: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reports cover different fleets (ego {ego:?}, coop {coop:?})")]
    FleetMismatch { ego: Vec<VehicleId>, coop: Vec<VehicleId> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PolynomialRate,
}

/// Fuel-rate surface `exp(Σ K[i][j] · v^i · a^j)` in L/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub kind: ModelKind,
    /// Table used for a ≥ 0; row is the speed power, column the acceleration power.
    pub accel_coefficients: [[f64; 4]; 4],
    /// Table used for a < 0.
    pub decel_coefficients: [[f64; 4]; 4],
    /// Lowest rate the model reports, L/s.
    pub idle_rate: f64,
    /// Energy content of one litre of fuel, kJ.
    pub energy_per_litre_kj: f64,
}

impl Default for EnergyModel {
    /// Light-duty gasoline vehicle.
    fn default() -> Self {
        EnergyModel {
            kind: ModelKind::PolynomialRate,
            accel_coefficients: [
                [-7.73452, 0.22946, -0.00561, 9.773e-5],
                [0.02799, 0.0068, -0.00077221, 8.38e-6],
                [-0.0002228, -4.402e-5, 7.90e-7, 8.17e-7],
                [1.09e-6, 4.80e-8, 3.27e-8, -7.79e-9],
            ],
            decel_coefficients: [
                [-7.73452, -0.01799, -0.00427, 0.00018829],
                [0.02804, 0.00772, 0.00083744, -3.387e-5],
                [-0.00021988, -5.219e-5, -7.44e-6, 2.77e-7],
                [1.08e-6, 2.47e-7, 4.87e-8, 3.79e-10],
            ],
            idle_rate: 2.5e-4,
            energy_per_litre_kj: 32_000.0,
        }
    }
}

impl EnergyModel {
    pub fn from_json_str(text: &str) -> Result<Self, MetricsError> {
        let model: EnergyModel = serde_json::from_str(text)?;
        model.check_fields()?;
        Ok(model)
    }

    fn check_fields(&self) -> Result<(), MetricsError> {
        let all_finite = self
            .accel_coefficients
            .iter()
            .chain(&self.decel_coefficients)
            .flatten()
            .all(|k| k.is_finite());
        if !all_finite {
            return Err(MetricsError::InvalidModel("non-finite coefficient".into()));
        }
        if !(self.idle_rate > 0.0 && self.idle_rate.is_finite()) {
            return Err(MetricsError::InvalidModel(format!("idle rate must be positive, got {}", self.idle_rate)));
        }
        if !(self.energy_per_litre_kj > 0.0 && self.energy_per_litre_kj.is_finite()) {
            return Err(MetricsError::InvalidModel(format!(
                "energy per litre must be positive, got {}",
                self.energy_per_litre_kj
            )));
        }
        Ok(())
    }

    /// Checks that the rate is positive and finite over the operating box
    /// `[0, v_lim] × [−d_max, a_max]` (m/s, m/s²).
    pub fn validate(&self, v_lim: f64, d_max: f64, a_max: f64) -> Result<(), MetricsError> {
        self.check_fields()?;
        const N: usize = 40;
        for i in 0..=N {
            let v = v_lim * i as f64 / N as f64;
            for j in 0..=N {
                let a = -d_max + (a_max + d_max) * j as f64 / N as f64;
                let r = self.fuel_rate(v, a);
                if !(r > 0.0 && r.is_finite()) {
                    return Err(MetricsError::InvalidModel(format!("rate {r} at v = {v} m/s, a = {a} m/s²")));
                }
            }
        }
        Ok(())
    }

    /// Fuel rate in L/s for speed `v` (m/s) and acceleration `a` (m/s²).
    pub fn fuel_rate(&self, v: f64, a: f64) -> f64 {
        let (vk, ak) = (v * MPS_TO_KMH, a * MPS_TO_KMH);
        let k = if a >= 0.0 { &self.accel_coefficients } else { &self.decel_coefficients };
        let mut exponent = 0.0;
        let mut vp = 1.0;
        for row in k {
            let mut ap = 1.0;
            for c in row {
                exponent += c * vp * ap;
                ap *= ak;
            }
            vp *= vk;
        }
        exponent.exp().max(self.idle_rate)
    }

    /// Power drawn, kW (kJ/s).
    pub fn power_kw(&self, v: f64, a: f64) -> f64 {
        self.fuel_rate(v, a) * self.energy_per_litre_kj
    }
}

/// Number of vehicles whose stop-bar crossing lies in the closed window.
pub fn throughput_in_window(log: &TrajectoryLog, window: &GreenWindow) -> usize {
    log.crossings
        .values()
        .filter(|&&t| t >= window.start_s - WINDOW_TOL && t <= window.end_s + WINDOW_TOL)
        .count()
}

/// Trapezoidal integral of power over `[t_from, t_to]` for one vehicle's rows,
/// sorted by time. The rate is taken as piecewise linear between rows.
pub fn energy_between(rows: &[VehicleState], model: &EnergyModel, t_from: f64, t_to: f64) -> f64 {
    let mut total = 0.0;
    for pair in rows.windows(2) {
        let (r0, r1) = (&pair[0], &pair[1]);
        let (lo, hi) = (r0.t.max(t_from), r1.t.min(t_to));
        if hi <= lo || r1.t <= r0.t {
            continue;
        }
        let (p0, p1) = (model.power_kw(r0.v, r0.a), model.power_kw(r1.v, r1.a));
        let at = |t: f64| p0 + (p1 - p0) * (t - r0.t) / (r1.t - r0.t);
        total += 0.5 * (at(lo) + at(hi)) * (hi - lo);
    }
    total
}

/// Per-vehicle energy in kJ from the first logged instant to the trip end, or
/// to the end of the log for vehicles that never reach it.
pub fn estimate_energy(log: &TrajectoryLog, model: &EnergyModel) -> BTreeMap<VehicleId, f64> {
    by_vehicle(log)
        .into_iter()
        .map(|(id, rows)| {
            let (t0, t1) = trip_span(log, id, &rows);
            (id, energy_between(&rows, model, t0, t1))
        })
        .collect()
}

fn by_vehicle(log: &TrajectoryLog) -> BTreeMap<VehicleId, Vec<VehicleState>> {
    let mut map: BTreeMap<VehicleId, Vec<VehicleState>> = BTreeMap::new();
    for r in &log.rows {
        map.entry(r.vehicle_id).or_default().push(*r);
    }
    for rows in map.values_mut() {
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    map
}

fn trip_span(log: &TrajectoryLog, id: VehicleId, rows: &[VehicleState]) -> (f64, f64) {
    let t0 = rows.first().map_or(0.0, |r| r.t);
    let last = rows.last().map_or(t0, |r| r.t);
    (t0, log.trip_end_times.get(&id).copied().unwrap_or(last).min(last))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowCount {
    pub start_s: f64,
    pub end_s: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Throughput {
    pub window_1: usize,
    pub window_2: usize,
    pub per_window: Vec<WindowCount>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VehicleMetrics {
    pub vehicle_id: VehicleId,
    pub crossing_time_s: Option<f64>,
    pub trip_end_time_s: Option<f64>,
    pub travel_time_s: f64,
    pub energy_kj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Totals {
    pub vehicles: usize,
    pub energy_kj: f64,
    pub travel_time_s: f64,
    pub energy_per_vehicle_kj: f64,
    pub travel_time_per_vehicle_s: f64,
}

/// Percentage changes of the cooperative policy relative to the ego baseline.
/// Positive energy and travel-time deltas mean the cooperative run is lower;
/// positive throughput deltas mean it serves more vehicles. `None` marks a
/// ratio with a zero baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Deltas {
    pub energy_total_pct: Option<f64>,
    pub energy_per_vehicle_pct: Option<f64>,
    pub travel_time_pct: Option<f64>,
    pub throughput_window_1_pct: Option<f64>,
    pub throughput_window_2_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub throughput: Throughput,
    pub per_vehicle: Vec<VehicleMetrics>,
    pub totals: Totals,
    pub deltas: Option<Deltas>,
}

impl MetricsReport {
    pub fn vehicle_ids(&self) -> Vec<VehicleId> {
        self.per_vehicle.iter().map(|v| v.vehicle_id).collect()
    }
}

pub fn build_report(log: &TrajectoryLog, windows: &[GreenWindow], model: &EnergyModel) -> MetricsReport {
    let per_window: Vec<WindowCount> = windows
        .iter()
        .map(|w| WindowCount {
            start_s: w.start_s,
            end_s: w.end_s,
            count: throughput_in_window(log, w),
        })
        .collect();
    let count = |k: usize| per_window.get(k).map_or(0, |w| w.count);
    let throughput = Throughput {
        window_1: count(0),
        window_2: count(1),
        per_window: per_window.clone(),
    };

    let per_vehicle: Vec<VehicleMetrics> = by_vehicle(log)
        .into_iter()
        .map(|(id, rows)| {
            let (t0, t1) = trip_span(log, id, &rows);
            VehicleMetrics {
                vehicle_id: id,
                crossing_time_s: log.crossings.get(&id).copied(),
                trip_end_time_s: log.trip_end_times.get(&id).copied(),
                travel_time_s: t1 - t0,
                energy_kj: energy_between(&rows, model, t0, t1),
            }
        })
        .collect();

    let n = per_vehicle.len();
    let energy: f64 = per_vehicle.iter().map(|v| v.energy_kj).sum();
    let travel: f64 = per_vehicle.iter().map(|v| v.travel_time_s).sum();
    let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    MetricsReport {
        throughput,
        per_vehicle,
        totals: Totals {
            vehicles: n,
            energy_kj: energy,
            travel_time_s: travel,
            energy_per_vehicle_kj: mean(energy),
            travel_time_per_vehicle_s: mean(travel),
        },
        deltas: None,
    }
}

fn relative(base: f64, change: f64) -> Option<f64> {
    if change == 0.0 {
        Some(0.0)
    } else if base == 0.0 {
        None
    } else {
        Some(100.0 * change / base)
    }
}

pub fn compare_reports(ego: &MetricsReport, coop: &MetricsReport) -> Result<Deltas, MetricsError> {
    let (e_ids, c_ids) = (ego.vehicle_ids(), coop.vehicle_ids());
    if e_ids != c_ids {
        return Err(MetricsError::FleetMismatch { ego: e_ids, coop: c_ids });
    }
    let (e, c) = (&ego.totals, &coop.totals);
    let tp = |a: usize, b: usize| relative(a as f64, b as f64 - a as f64);
    Ok(Deltas {
        energy_total_pct: relative(e.energy_kj, e.energy_kj - c.energy_kj),
        energy_per_vehicle_pct: relative(e.energy_per_vehicle_kj, e.energy_per_vehicle_kj - c.energy_per_vehicle_kj),
        travel_time_pct: relative(e.travel_time_s, e.travel_time_s - c.travel_time_s),
        throughput_window_1_pct: tp(ego.throughput.window_1, coop.throughput.window_1),
        throughput_window_2_pct: tp(ego.throughput.window_2, coop.throughput.window_2),
    })
}

/// Both reports plus the deltas between them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub ego: MetricsReport,
    pub coop: MetricsReport,
    pub deltas: Deltas,
}

pub fn compare(ego: MetricsReport, coop: MetricsReport) -> Result<Comparison, MetricsError> {
    let deltas = compare_reports(&ego, &coop)?;
    Ok(Comparison { ego, coop, deltas })
}
