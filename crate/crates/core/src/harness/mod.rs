//! Deterministic 1-D longitudinal driving harness.
//!
//! A linear policy drives along a straight route populated with scripted
//! hazards (traffic lights, stopped lead vehicles, crossing pedestrians, speed
//! zones). Rollouts are mapped to structured performance logs whose infraction
//! messages use the leaderboard phrasing, and scored with driving score,
//! success, efficiency and comfortness.

mod policy;
mod route;
mod sim;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use policy::{features, policy_act, Action, Observation, PolicyParams, N_FEATURES};
pub use route::{
    load_routes, pedestrian_trigger, save_routes, scenario_to_route, Hazard, HazardKind, HazardSpec, Route,
    PEDESTRIAN_TRIGGER_DAY_M, PEDESTRIAN_TRIGGER_NIGHT_M,
};
pub use route::{read_jsonl, write_jsonl};
pub use sim::{
    run_route, Incident, InfractionKind, Step, TerminalReason, Trajectory, SPEEDING_GRACE_STEPS, SPEEDING_TOLERANCE_MPS,
};

use crate::error::{Error, Result};
use crate::scenario::ScenarioAttributes;

pub const DT_S: f64 = 0.1;
pub const SPEED_CAP_MPS: f64 = 15.0;
pub const ACCEL_MIN: f64 = -4.0;
pub const ACCEL_MAX: f64 = 2.0;
pub const SENSING_RANGE_M: f64 = 60.0;
pub const FOG_RANGE_FACTOR: f64 = 0.5;
pub const DEFAULT_ROUTE_LENGTH_M: f64 = 150.0;
pub const DEFAULT_TIME_LIMIT_STEPS: usize = 600;
pub const JERK_REF: f64 = 2.0;

/// Multiplicative driving-score penalty per infraction.
pub fn penalty(kind: InfractionKind) -> f64 {
    match kind {
        InfractionKind::Collision => 0.5,
        InfractionKind::RedLight => 0.7,
        InfractionKind::Speeding => 0.9,
        InfractionKind::RouteDeviation => 0.7,
    }
}

/// Fastest possible time to cover `distance_m` from rest: full throttle up to
/// the speed cap, then cruise.
pub fn ideal_time_s(distance_m: f64) -> f64 {
    let ramp_s = SPEED_CAP_MPS / ACCEL_MAX;
    let ramp_m = 0.5 * ACCEL_MAX * ramp_s * ramp_s;
    if distance_m <= ramp_m {
        (2.0 * distance_m / ACCEL_MAX).sqrt()
    } else {
        ramp_s + (distance_m - ramp_m) / SPEED_CAP_MPS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub step: usize,
    pub position: [f64; 3],
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hazard: Option<HazardKind>,
    #[serde(default)]
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub driving_score: f64,
    pub success: bool,
    pub efficiency: f64,
    pub comfortness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceLog {
    pub route_id: String,
    pub conditions: ScenarioAttributes,
    pub events: Vec<InfractionEvent>,
    pub route_completion_fraction: f64,
    pub mean_abs_jerk: f64,
    pub metrics: Metrics,
}

impl PerformanceLog {
    pub fn count(&self, kind: InfractionKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn is_failure(&self) -> bool {
        !self.events.is_empty() || !self.metrics.success
    }
}

/// Coordinate rendering used in log messages: at most three decimals, always
/// with a decimal point.
fn coord(v: f64) -> String {
    let rounded = (v * 1000.0).round() / 1000.0;
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    if rounded.fract() == 0.0 {
        format!("{rounded:.1}")
    } else {
        format!("{rounded}")
    }
}

pub fn event_message(kind: InfractionKind, position: [f64; 3]) -> String {
    let at = format!(
        "(x={}, y={}, z={})",
        coord(position[0]),
        coord(position[1]),
        coord(position[2])
    );
    match kind {
        InfractionKind::RedLight => format!("Agent ran a red light at {at}"),
        InfractionKind::RouteDeviation => format!("Agent deviated from the route at {at}"),
        InfractionKind::Collision => format!("Agent collided with an obstacle at {at}"),
        InfractionKind::Speeding => format!("Agent exceeded the speed limit at {at}"),
    }
}

/// `100 * completion * product of per-event penalties`.
pub fn driving_score(completion: f64, events: &[InfractionEvent]) -> f64 {
    let factor: f64 = events.iter().map(|e| penalty(e.kind)).product();
    100.0 * completion * factor
}

/// Maps a trajectory to its performance log.
pub fn evaluate(trajectory: &Trajectory, route: &Route) -> PerformanceLog {
    let mut events: Vec<InfractionEvent> = trajectory
        .incidents
        .iter()
        .map(|inc| {
            let position = [inc.position_m, 0.0, 0.0];
            InfractionEvent {
                kind: inc.kind,
                step: inc.step,
                position,
                message: event_message(inc.kind, position),
                hazard: inc.hazard,
                magnitude: inc.magnitude,
            }
        })
        .collect();
    if trajectory.terminal_reason == TerminalReason::Timeout {
        let position = [trajectory.final_position_m, 0.0, 0.0];
        events.push(InfractionEvent {
            kind: InfractionKind::RouteDeviation,
            step: trajectory.steps.len(),
            position,
            message: event_message(InfractionKind::RouteDeviation, position),
            hazard: None,
            magnitude: 0.0,
        });
    }
    let completion = match trajectory.terminal_reason {
        TerminalReason::Goal => 1.0,
        _ => (trajectory.final_position_m / route.length_m).clamp(0.0, 1.0),
    };
    let critical = events
        .iter()
        .any(|e| matches!(e.kind, InfractionKind::Collision | InfractionKind::RedLight));
    let covered = completion * route.length_m;
    let elapsed = trajectory.elapsed_s();
    let efficiency = if elapsed > 0.0 {
        100.0 * ideal_time_s(covered) / elapsed
    } else {
        0.0
    };
    let mean_abs_jerk = trajectory.mean_abs_jerk();
    let metrics = Metrics {
        driving_score: driving_score(completion, &events),
        success: !critical && completion == 1.0,
        efficiency,
        comfortness: 100.0 * (1.0 - mean_abs_jerk / JERK_REF).max(0.0),
    };
    PerformanceLog {
        route_id: route.route_id.clone(),
        conditions: route.conditions.clone(),
        events,
        route_completion_fraction: completion,
        mean_abs_jerk,
        metrics,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub routes: usize,
    pub driving_score: f64,
    /// Percentage of successful routes.
    pub success_rate: f64,
    pub efficiency: f64,
    pub comfortness: f64,
    pub successes: usize,
    pub infractions: usize,
}

impl Summary {
    pub fn of(logs: &[PerformanceLog]) -> Self {
        let n = logs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(&PerformanceLog) -> f64| logs.iter().map(f).sum::<f64>() / n as f64;
        let successes = logs.iter().filter(|l| l.metrics.success).count();
        Self {
            routes: n,
            driving_score: mean(&|l| l.metrics.driving_score),
            success_rate: 100.0 * successes as f64 / n as f64,
            efficiency: mean(&|l| l.metrics.efficiency),
            comfortness: mean(&|l| l.metrics.comfortness),
            successes,
            infractions: logs.iter().map(|l| l.events.len()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub logs: Vec<PerformanceLog>,
    pub summary: Summary,
}

/// Evaluates the policy on every route; logs keep route order.
pub fn pre_evaluate(params: &PolicyParams, routes: &[Route]) -> Result<Evaluation> {
    if routes.is_empty() {
        return Err(Error::EmptyRouteSet);
    }
    let logs: Vec<PerformanceLog> = routes
        .par_iter()
        .map(|route| evaluate(&run_route(params, route), route))
        .collect();
    let summary = Summary::of(&logs);
    Ok(Evaluation { logs, summary })
}

pub fn load_logs(path: &std::path::Path) -> Result<Vec<PerformanceLog>> {
    read_jsonl(path, |_, _: &PerformanceLog| Ok(()))
}

pub fn save_logs(path: &std::path::Path, logs: &[PerformanceLog]) -> Result<()> {
    write_jsonl(path, logs)
}
