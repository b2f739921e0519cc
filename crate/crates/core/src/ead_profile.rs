//! Leader arrival bounds, signal-scenario identification and the piecewise
//! trigonometric-linear speed profile.
//!
//! All profile times are relative to the moment the profile is planned and all
//! positions are distances travelled since then, so `position(t_arr) = d_0`
//! puts the vehicle on the stop bar.
//!
//! A profile has up to five active segments. With `Δ = v_d`:
//!
//! | segment | interval | acceleration |
//! |---|---|---|
//! | 1 | `[0, π/2m]` | `Δ·m·sin(m t)` |
//! | 2 | `[π/2m, t_1]` | `Δ·m·cos(n s)` |
//! | plateau | `[t_1, g]` | `0` |
//! | 4 | `[g, t_2]` | `−Δ·m·sin(n s)` |
//! | 5 | `[t_2, t_3]` | `−Δ·m·cos(m s)` |
//!
//! where `s` restarts at each segment start and `g` is the departure start:
//! `t_arr` for the no-stop scenarios and the green start for a full stop.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::Serialize;
use thiserror::Error;

use crate::scenario::GreenWindow;

const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("vehicle is stopped (v_c = 0); cruise time to arrival is undefined")]
    StoppedVehicle,
    #[error("invalid profile input: {0}")]
    InvalidInput(String),
    #[error("{scenario:?} profile infeasible for t_arr = {t_arr:.3} s: {reason}")]
    Infeasible {
        scenario: ScenarioKind,
        t_arr: f64,
        reason: String,
    },
    #[error("breakpoints out of order: {0}")]
    BreakpointOrder(String),
}

/// The four courses of action available to a vehicle approaching the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScenarioKind {
    SlowNoStop,
    SpeedUp,
    Cruise,
    FullStop,
}

/// Comfort and safety limits applied to a profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MotionLimits {
    pub a_max: f64,
    pub d_max: f64,
    pub jerk_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArrivalBounds {
    pub v_c: f64,
    pub d_0: f64,
    /// Time to arrival at the current speed.
    pub t_cr: f64,
    /// Earliest time to arrival with a jerk-limited climb to the speed limit.
    pub t_e: f64,
    /// Latest time to arrival without stopping (slowing to the coasting speed).
    pub t_l: f64,
    /// Frequency of the climb transition; infinite when already at the limit.
    pub p: f64,
    /// Frequency of the slow-down transition; infinite when at or below coasting speed.
    pub q: f64,
}

/// Frequency of a sinusoidal speed change of size `dv` bounded by peak
/// acceleration `accel` and peak jerk `jerk`.
fn transition_frequency(dv: f64, accel: f64, jerk: f64) -> f64 {
    (2.0 * accel / dv).min((2.0 * jerk / dv).sqrt())
}

// the negated comparisons also reject NaN inputs
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn arrival_bounds(
    v_c: f64,
    d_0: f64,
    v_lim: f64,
    v_coast: f64,
    limits: &MotionLimits,
) -> Result<ArrivalBounds, ProfileError> {
    if v_c <= 0.0 {
        return Err(ProfileError::StoppedVehicle);
    }
    if !(d_0 > 0.0) || !(v_coast > 0.0) || v_c > v_lim + EPS || v_coast > v_lim {
        return Err(ProfileError::InvalidInput(format!(
            "need d_0 > 0 and 0 < v_coast <= v_lim, v_c <= v_lim (d_0={d_0}, v_c={v_c}, v_coast={v_coast}, v_lim={v_lim})"
        )));
    }
    let t_cr = d_0 / v_c;

    let (p, t_e) = if v_lim - v_c <= EPS {
        (f64::INFINITY, d_0 / v_lim)
    } else {
        let p = transition_frequency(v_lim - v_c, limits.a_max, limits.jerk_max);
        let half = PI / (2.0 * p);
        (p, (d_0 - v_c * half) / v_lim + half)
    };

    let (q, t_l) = if v_c - v_coast <= EPS {
        (f64::INFINITY, t_cr)
    } else {
        let q = transition_frequency(v_c - v_coast, limits.d_max, limits.jerk_max);
        let half = PI / (2.0 * q);
        (q, (d_0 - v_c * half) / v_coast + half)
    };

    Ok(ArrivalBounds {
        v_c,
        d_0,
        t_cr,
        t_e: t_e.min(t_cr),
        t_l: t_l.max(t_cr),
        p,
        q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioChoice {
    pub scenario: ScenarioKind,
    /// Time to arrival, relative to the planning instant.
    pub t_arr: f64,
    /// Latest feasible arrival of the chosen scenario inside the window
    /// (equal to `t_arr` for cruise and full stop).
    pub t_arr_max: f64,
    /// Relative green start a full stop waits for; `t_arr` otherwise.
    pub hold_until: f64,
}

/// Picks cruise, speed-up, slow-down or full stop for reaching `window`,
/// planning at absolute time `t0`.
pub fn identify_scenario(bounds: &ArrivalBounds, t0: f64, window: &GreenWindow) -> ScenarioChoice {
    let ws = window.start_s - t0;
    let we = window.end_s - t0;
    let tol = 1e-9;
    let pick = |scenario, t_arr, t_arr_max| ScenarioChoice {
        scenario,
        t_arr,
        t_arr_max,
        hold_until: t_arr,
    };

    if bounds.t_cr >= ws - tol && bounds.t_cr <= we + tol {
        return pick(ScenarioKind::Cruise, bounds.t_cr, bounds.t_cr);
    }
    let (lo, hi) = (bounds.t_e.max(ws), bounds.t_cr.min(we));
    if lo <= hi + tol {
        return pick(ScenarioKind::SpeedUp, lo, hi.max(lo));
    }
    let (lo, hi) = (bounds.t_cr.max(ws), bounds.t_l.min(we));
    if lo <= hi + tol {
        return pick(ScenarioKind::SlowNoStop, lo, hi.max(lo));
    }
    let t_arr = 2.0 * bounds.d_0 / bounds.v_c;
    ScenarioChoice {
        scenario: ScenarioKind::FullStop,
        t_arr,
        t_arr_max: t_arr,
        hold_until: ws.max(t_arr),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileParams {
    pub v_c: f64,
    pub d_0: f64,
    pub t_arr: f64,
    pub v_h: f64,
    pub v_d: f64,
    pub m: f64,
    pub n: f64,
}

fn infeasible(scenario: ScenarioKind, t_arr: f64, reason: impl Into<String>) -> ProfileError {
    ProfileError::Infeasible {
        scenario,
        t_arr,
        reason: reason.into(),
    }
}

/// Positive root of `m²(nD − (π/2 − 1)) − (πn/2)m − n² = 0`, the condition
/// that the approach covers exactly `d_0` by `D = d_0/v_h`.
fn distance_root(n: f64, d: f64) -> Option<f64> {
    let a = n * d - (FRAC_PI_2 - 1.0);
    if a <= 0.0 {
        return None;
    }
    let b = -FRAC_PI_2 * n;
    let c = -n * n;
    Some((-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a))
}

/// Frequencies and speeds of the profile reaching the stop bar after `t_arr`.
///
/// `n` is the largest value allowed by the acceleration and jerk bounds and `m`
/// then follows from the distance condition. The realized peaks `|v_d|·m` and
/// `|v_d|·m·max(m, n)` are checked afterwards, together with the plateau speed
/// and the approach fitting before `t_arr`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn solve_profile_params(
    v_c: f64,
    d_0: f64,
    t_arr: f64,
    v_lim: f64,
    limits: &MotionLimits,
    scenario: ScenarioKind,
) -> Result<ProfileParams, ProfileError> {
    if !(t_arr > 0.0) || !(d_0 > 0.0) || v_c < 0.0 {
        return Err(ProfileError::InvalidInput(format!(
            "need t_arr > 0, d_0 > 0, v_c >= 0 (t_arr={t_arr}, d_0={d_0}, v_c={v_c})"
        )));
    }
    match scenario {
        ScenarioKind::Cruise => {
            return Ok(ProfileParams {
                v_c,
                d_0,
                t_arr: d_0 / v_c,
                v_h: v_c,
                v_d: 0.0,
                m: 0.0,
                n: 0.0,
            })
        }
        ScenarioKind::FullStop => {
            if v_c <= 0.0 {
                return Err(ProfileError::StoppedVehicle);
            }
            let v_h = v_c / 2.0;
            let m = PI * v_h / d_0;
            let params = ProfileParams {
                v_c,
                d_0,
                t_arr: d_0 / v_h,
                v_h,
                v_d: v_h - v_c,
                m,
                n: m,
            };
            check_peaks(&params, limits, scenario)?;
            return Ok(params);
        }
        _ => {}
    }

    let v_h = d_0 / t_arr;
    let v_d = v_h - v_c;
    if v_d.abs() <= EPS {
        return solve_profile_params(v_c, d_0, t_arr, v_lim, limits, ScenarioKind::Cruise);
    }
    let expect_up = scenario == ScenarioKind::SpeedUp;
    if (v_d > 0.0) != expect_up {
        return Err(infeasible(scenario, t_arr, format!("speed delta {v_d:.4} has the wrong sign")));
    }
    let bound = if expect_up { limits.a_max } else { limits.d_max };
    let n = (bound / v_d.abs()).min((limits.jerk_max / v_d.abs()).sqrt());
    let n_min = (FRAC_PI_2 - 1.0) * v_h / d_0;
    if n <= n_min {
        return Err(infeasible(scenario, t_arr, format!("n = {n:.4} not above {n_min:.4}")));
    }
    let m = distance_root(n, t_arr).ok_or_else(|| infeasible(scenario, t_arr, "no positive root"))?;
    let params = ProfileParams {
        v_c,
        d_0,
        t_arr,
        v_h,
        v_d,
        m,
        n,
    };
    check_peaks(&params, limits, scenario)?;

    let t_1 = FRAC_PI_2 / m + FRAC_PI_2 / n;
    if t_1 > t_arr + EPS {
        return Err(infeasible(scenario, t_arr, format!("approach ends at {t_1:.3} s, after arrival")));
    }
    let plateau = v_c + v_d * (1.0 + m / n);
    if plateau < -EPS || plateau > v_lim + EPS {
        return Err(infeasible(scenario, t_arr, format!("plateau speed {plateau:.3} outside [0, v_lim]")));
    }
    Ok(params)
}

fn check_peaks(p: &ProfileParams, limits: &MotionLimits, scenario: ScenarioKind) -> Result<(), ProfileError> {
    let peak = p.v_d.abs() * p.m;
    // slowing down brakes first and accelerates on departure, and vice versa
    if peak > limits.a_max.min(limits.d_max) + EPS {
        return Err(infeasible(scenario, p.t_arr, format!("peak acceleration {peak:.3} over bound")));
    }
    let jerk = peak * p.m.max(p.n);
    if jerk > limits.jerk_max + EPS {
        return Err(infeasible(scenario, p.t_arr, format!("peak jerk {jerk:.3} over bound")));
    }
    Ok(())
}

/// Breakpoints of a profile, relative to its planning instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Breakpoints {
    /// Join of segments 1 and 2, `π/(2m)`.
    pub t_join: f64,
    /// End of the approach.
    pub t_1: f64,
    /// Start of the departure: `t_arr`, or the green start after a full stop.
    pub t_depart: f64,
    /// Join of segments 4 and 5.
    pub t_2: f64,
    /// End of the departure; speed is back at `v_c`.
    pub t_3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrigProfile {
    pub scenario: ScenarioKind,
    pub v_c: f64,
    pub v_h: f64,
    pub v_d: f64,
    pub m: f64,
    pub n: f64,
    pub d_0: f64,
    pub t_arr: f64,
    pub hold_until: f64,
    pub breakpoints: Breakpoints,
    // state at each breakpoint, cached for closed-form evaluation
    #[serde(skip)]
    nodes: [(f64, f64); 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileSample {
    pub accel: f64,
    pub speed: f64,
    pub position: f64,
}

/// Assembles the profile. `hold_until` only matters for a full stop and is
/// raised to `t_arr` if earlier.
pub fn build_profile(
    params: &ProfileParams,
    scenario: ScenarioKind,
    hold_until: f64,
) -> Result<TrigProfile, ProfileError> {
    let ProfileParams { v_c, v_h, v_d, m, n, d_0, t_arr } = *params;
    if scenario == ScenarioKind::Cruise || v_d == 0.0 {
        let t = d_0 / v_c;
        return Ok(TrigProfile {
            scenario: ScenarioKind::Cruise,
            v_c,
            v_h: v_c,
            v_d: 0.0,
            m: 0.0,
            n: 0.0,
            d_0,
            t_arr: t,
            hold_until: t,
            breakpoints: Breakpoints {
                t_join: 0.0,
                t_1: 0.0,
                t_depart: t,
                t_2: t,
                t_3: t,
            },
            nodes: [(0.0, v_c); 5],
        });
    }

    let t_join = FRAC_PI_2 / m;
    let t_1 = t_join + FRAC_PI_2 / n;
    let g = if scenario == ScenarioKind::FullStop {
        hold_until.max(t_arr)
    } else {
        t_arr
    };
    let t_2 = g + FRAC_PI_2 / n;
    let t_3 = t_2 + FRAC_PI_2 / m;
    if t_1 > g + EPS {
        return Err(ProfileError::BreakpointOrder(format!(
            "approach ends at {t_1:.6} s after departure start {g:.6} s"
        )));
    }

    let v1 = v_c + v_d;
    let x1 = v_c * t_join + v_d * (t_join - 1.0 / m);
    let v2 = v1 + v_d * m / n;
    let x2 = x1 + v1 * FRAC_PI_2 / n + v_d * m / (n * n);
    let x3 = x2 + v2 * (g - t_1);
    let v4 = v2 - v_d * m / n;
    let x4 = x3 + v2 * FRAC_PI_2 / n - v_d * (m / n) * (FRAC_PI_2 / n - 1.0 / n);
    let x5 = x4 + v4 * FRAC_PI_2 / m - v_d / m;

    Ok(TrigProfile {
        scenario,
        v_c,
        v_h,
        v_d,
        m,
        n,
        d_0,
        t_arr,
        hold_until: g,
        breakpoints: Breakpoints {
            t_join,
            t_1,
            t_depart: g,
            t_2,
            t_3,
        },
        nodes: [(x1, v1), (x2, v2), (x3, v2), (x4, v4), (x5, v_c)],
    })
}

impl TrigProfile {
    /// Acceleration, speed and distance travelled at relative time `t`,
    /// integrated in closed form per segment. Before `t = 0` the entry speed is
    /// extrapolated.
    pub fn eval(&self, t: f64) -> ProfileSample {
        let (d, m, n, v_c) = (self.v_d, self.m, self.n, self.v_c);
        let b = &self.breakpoints;
        let sample = |accel, speed, position| ProfileSample { accel, speed, position };
        if self.scenario == ScenarioKind::Cruise || t <= 0.0 {
            return sample(0.0, v_c, v_c * t);
        }
        let [(x1, v1), (x2, v2), (x3, _), (x4, v4), (x5, _)] = self.nodes;
        if t <= b.t_join {
            let s = m * t;
            sample(d * m * s.sin(), v_c + d * (1.0 - s.cos()), v_c * t + d * (t - s.sin() / m))
        } else if t <= b.t_1 {
            let s = t - b.t_join;
            let ns = n * s;
            sample(
                d * m * ns.cos(),
                v1 + d * (m / n) * ns.sin(),
                x1 + v1 * s + d * (m / (n * n)) * (1.0 - ns.cos()),
            )
        } else if t <= b.t_depart {
            sample(0.0, v2, x2 + v2 * (t - b.t_1))
        } else if t <= b.t_2 {
            let s = t - b.t_depart;
            let ns = n * s;
            sample(
                -d * m * ns.sin(),
                v2 - d * (m / n) * (1.0 - ns.cos()),
                x3 + v2 * s - d * (m / n) * (s - ns.sin() / n),
            )
        } else if t <= b.t_3 {
            let s = t - b.t_2;
            let ms = m * s;
            sample(-d * m * ms.cos(), v4 - d * ms.sin(), x4 + v4 * s - d * (1.0 - ms.cos()) / m)
        } else {
            sample(0.0, v_c, x5 + v_c * (t - b.t_3))
        }
    }

    /// End of all non-zero acceleration.
    pub fn active_until(&self) -> f64 {
        self.breakpoints.t_3
    }

    /// Relative time the stop bar is crossed: departure start for a full stop,
    /// `t_arr` otherwise.
    pub fn crossing_time(&self) -> f64 {
        match self.scenario {
            ScenarioKind::FullStop => self.hold_until,
            _ => self.t_arr,
        }
    }
}

pub fn eval_profile(profile: &TrigProfile, t: f64) -> ProfileSample {
    profile.eval(t)
}

/// Profile for a given arrival time: cruise when it equals the cruise time,
/// otherwise speed up or slow down (the slow-down may go below the coasting
/// speed; a full stop is never chosen here).
pub fn profile_for_arrival(
    v_c: f64,
    d_0: f64,
    t_arr: f64,
    v_lim: f64,
    limits: &MotionLimits,
) -> Result<TrigProfile, ProfileError> {
    if v_c <= 0.0 {
        return Err(ProfileError::StoppedVehicle);
    }
    let t_cr = d_0 / v_c;
    let scenario = if (t_arr - t_cr).abs() <= 1e-9 {
        ScenarioKind::Cruise
    } else if t_arr < t_cr {
        ScenarioKind::SpeedUp
    } else {
        ScenarioKind::SlowNoStop
    };
    let params = solve_profile_params(v_c, d_0, t_arr, v_lim, limits, scenario)?;
    build_profile(&params, scenario, t_arr)
}

fn full_stop(v_c: f64, d_0: f64, hold_until: f64, v_lim: f64, limits: &MotionLimits) -> Result<TrigProfile, ProfileError> {
    let params = solve_profile_params(v_c, d_0, 2.0 * d_0 / v_c, v_lim, limits, ScenarioKind::FullStop)?;
    build_profile(&params, ScenarioKind::FullStop, hold_until)
}

/// Step used when a requested arrival is parameter-infeasible and a later one
/// inside the same window is tried instead.
pub const ARRIVAL_RETRY_STEP: f64 = 0.05;

fn first_feasible(
    v_c: f64,
    d_0: f64,
    from: f64,
    to: f64,
    v_lim: f64,
    limits: &MotionLimits,
) -> Result<TrigProfile, ProfileError> {
    let mut t = from;
    loop {
        match profile_for_arrival(v_c, d_0, t, v_lim, limits) {
            Ok(p) => return Ok(p),
            Err(e) if t >= to - 1e-12 => return Err(e),
            Err(_) => t = (t + ARRIVAL_RETRY_STEP).min(to),
        }
    }
}

/// Full planning pipeline for a cluster leader heading to `window` from
/// absolute time `t0`. An infeasible speed-up or slow-down is retried at later
/// arrivals within its feasible interval before falling back to a full stop.
pub fn plan_leader_profile(
    v_c: f64,
    d_0: f64,
    t0: f64,
    window: &GreenWindow,
    v_lim: f64,
    v_coast: f64,
    limits: &MotionLimits,
) -> Result<TrigProfile, ProfileError> {
    let bounds = arrival_bounds(v_c, d_0, v_lim, v_coast, limits)?;
    let choice = identify_scenario(&bounds, t0, window);
    match choice.scenario {
        ScenarioKind::Cruise => profile_for_arrival(v_c, d_0, bounds.t_cr, v_lim, limits),
        ScenarioKind::FullStop => full_stop(v_c, d_0, choice.hold_until, v_lim, limits),
        _ => first_feasible(v_c, d_0, choice.t_arr, choice.t_arr_max, v_lim, limits)
            .or_else(|_| full_stop(v_c, d_0, (window.start_s - t0).max(0.0), v_lim, limits)),
    }
}

/// Profile that crosses the stop bar at relative time `target`, or as soon as
/// possible after it up to `latest`.
///
/// A target beyond the no-stop bound is met by a full stop when the stop can be
/// completed before the target; otherwise the vehicle slows below the coasting
/// speed without stopping.
pub fn plan_profile_to_target(
    v_c: f64,
    d_0: f64,
    target: f64,
    latest: f64,
    v_lim: f64,
    v_coast: f64,
    limits: &MotionLimits,
) -> Result<TrigProfile, ProfileError> {
    let bounds = arrival_bounds(v_c, d_0, v_lim, v_coast, limits)?;
    if (target - bounds.t_cr).abs() <= 1e-9 {
        return profile_for_arrival(v_c, d_0, bounds.t_cr, v_lim, limits);
    }
    if target > bounds.t_l && 2.0 * d_0 / v_c <= target {
        if let Ok(p) = full_stop(v_c, d_0, target, v_lim, limits) {
            return Ok(p);
        }
    }
    first_feasible(v_c, d_0, target.max(bounds.t_e), latest.max(target), v_lim, limits)
}
