use serde::{Deserialize, Serialize};

use super::policy::{policy_act, Action, Observation, PolicyParams};
use super::route::{HazardKind, HazardSpec, Route};
use super::{DT_S, SPEED_CAP_MPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    Collision,
    RedLight,
    RouteDeviation,
    Speeding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Goal,
    Collision,
    Timeout,
}

/// Raw infraction observed during a rollout, before log formatting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub kind: InfractionKind,
    pub step: usize,
    pub position_m: f64,
    pub hazard: Option<HazardKind>,
    /// Impact speed for collisions, crossing speed for red lights, integrated
    /// excess speed (m) for speeding.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub observation: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub route_id: String,
    pub steps: Vec<Step>,
    pub terminal_reason: TerminalReason,
    pub final_position_m: f64,
    pub final_speed_mps: f64,
    pub incidents: Vec<Incident>,
}

impl Trajectory {
    pub fn elapsed_s(&self) -> f64 {
        self.steps.len() as f64 * DT_S
    }

    /// Mean absolute jerk of the commanded acceleration, m/s^3.
    pub fn mean_abs_jerk(&self) -> f64 {
        if self.steps.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .steps
            .windows(2)
            .map(|w| ((w[1].action.accel_mps2 - w[0].action.accel_mps2) / DT_S).abs())
            .sum();
        total / (self.steps.len() - 1) as f64
    }
}

/// Consecutive over-limit steps before a speeding infraction is raised.
pub const SPEEDING_GRACE_STEPS: usize = 10;
/// Tolerance above the limit before a step counts as over-limit, m/s.
pub const SPEEDING_TOLERANCE_MPS: f64 = 0.5;

fn light_is_red(spec: &HazardSpec, t: f64) -> bool {
    match *spec {
        HazardSpec::TrafficLight {
            phase_offset_s,
            cycle_s,
            red_s,
        } => (t + phase_offset_s).rem_euclid(cycle_s) < red_s,
        _ => false,
    }
}

struct World<'a> {
    route: &'a Route,
    range: f64,
    /// Trigger time of each pedestrian hazard, by hazard index.
    triggered_at: Vec<Option<f64>>,
}

impl World<'_> {
    /// Whether hazard `i` is something to react to at time `t`.
    fn is_active(&self, i: usize, t: f64) -> bool {
        match self.route.hazards[i].spec {
            HazardSpec::TrafficLight { .. } | HazardSpec::SpeedZone { .. } => true,
            HazardSpec::StoppedLeadVehicle { departs_after_s } => t < departs_after_s,
            HazardSpec::CrossingPedestrian { crossing_s, .. } => {
                matches!(self.triggered_at[i], Some(t0) if t < t0 + crossing_s)
            }
        }
    }

    /// Whether hazard `i` physically blocks the lane at time `t`.
    fn blocks(&self, i: usize, t: f64) -> bool {
        matches!(
            self.route.hazards[i].kind(),
            HazardKind::StoppedLeadVehicle | HazardKind::CrossingPedestrian
        ) && self.is_active(i, t)
    }

    fn update_triggers(&mut self, x: f64, t: f64) {
        for (i, h) in self.route.hazards.iter().enumerate() {
            if let HazardSpec::CrossingPedestrian { trigger_distance_m, .. } = h.spec {
                if self.triggered_at[i].is_none() && h.position_m > x && h.position_m - x <= trigger_distance_m {
                    self.triggered_at[i] = Some(t);
                }
            }
        }
    }

    fn speed_limit(&self, x: f64) -> f64 {
        self.route
            .hazards
            .iter()
            .filter_map(|h| match h.spec {
                HazardSpec::SpeedZone {
                    zone_length_m,
                    limit_mps,
                } if x >= h.position_m && x < h.position_m + zone_length_m => Some(limit_mps),
                _ => None,
            })
            .fold(SPEED_CAP_MPS, f64::min)
    }

    fn observe(&self, x: f64, v: f64, t: f64) -> Observation {
        let next = self
            .route
            .hazards
            .iter()
            .enumerate()
            .find(|(i, h)| h.position_m > x && self.is_active(*i, t));
        let mut obs = Observation {
            position_m: x,
            speed_mps: v,
            dist_to_next_hazard_m: self.range,
            sensing_range_m: self.range,
            hazard_kind_onehot: [0.0; 4],
            light_is_red: 0.0,
            speed_limit_mps: self.speed_limit(x),
        };
        if let Some((_, h)) = next {
            let dist = h.position_m - x;
            if dist <= self.range {
                obs.dist_to_next_hazard_m = dist;
                obs.hazard_kind_onehot[h.kind().index()] = 1.0;
                obs.light_is_red = f64::from(u8::from(light_is_red(&h.spec, t)));
            }
        }
        obs
    }
}

/// Rolls the policy out on `route` with explicit Euler integration at `DT_S`.
///
/// Position advances with the speed at the start of the step, so
/// `x[t+1] - x[t] == v[t] * dt`. A collision stops the ego vehicle at the
/// obstacle's position.
pub fn run_route(params: &PolicyParams, route: &Route) -> Trajectory {
    let mut world = World {
        route,
        range: route.sensing_range_m(),
        triggered_at: vec![None; route.hazards.len()],
    };
    let mut steps = Vec::new();
    let mut incidents = Vec::new();
    let mut zone_state: Vec<(usize, Option<usize>)> = vec![(0, None); route.hazards.len()];
    let mut zone_excess = vec![0.0; route.hazards.len()];
    let (mut x, mut v) = (0.0_f64, 0.0_f64);
    let mut terminal = TerminalReason::Timeout;

    for step in 0..route.time_limit_steps {
        let t = step as f64 * DT_S;
        world.update_triggers(x, t);
        let observation = world.observe(x, v, t);
        let action = policy_act(params, &observation);
        steps.push(Step { observation, action });

        for (i, h) in route.hazards.iter().enumerate() {
            if let HazardSpec::SpeedZone {
                zone_length_m,
                limit_mps,
            } = h.spec
            {
                if x >= h.position_m && x < h.position_m + zone_length_m {
                    zone_excess[i] += (v - limit_mps).max(0.0) * DT_S;
                    let (run, fired) = &mut zone_state[i];
                    *run = if v > limit_mps + SPEEDING_TOLERANCE_MPS {
                        *run + 1
                    } else {
                        0
                    };
                    if *run == SPEEDING_GRACE_STEPS && fired.is_none() {
                        *fired = Some(incidents.len());
                        incidents.push(Incident {
                            kind: InfractionKind::Speeding,
                            step,
                            position_m: x,
                            hazard: Some(HazardKind::SpeedZone),
                            magnitude: 0.0,
                        });
                    }
                }
            }
        }

        let mut x_next = x + v * DT_S;
        let v_next = (v + action.accel_mps2 * DT_S).clamp(0.0, SPEED_CAP_MPS);
        let mut collided = false;
        for (i, h) in route.hazards.iter().enumerate() {
            if !(h.position_m > x && h.position_m <= x_next) {
                continue;
            }
            if world.blocks(i, t) {
                incidents.push(Incident {
                    kind: InfractionKind::Collision,
                    step,
                    position_m: h.position_m,
                    hazard: Some(h.kind()),
                    magnitude: v,
                });
                x_next = h.position_m;
                collided = true;
                break;
            }
            if light_is_red(&h.spec, t) {
                incidents.push(Incident {
                    kind: InfractionKind::RedLight,
                    step,
                    position_m: h.position_m,
                    hazard: Some(HazardKind::TrafficLight),
                    magnitude: v,
                });
            }
        }
        x = x_next;
        if collided {
            v = 0.0;
            terminal = TerminalReason::Collision;
            break;
        }
        v = v_next;
        if x >= route.length_m {
            terminal = TerminalReason::Goal;
            break;
        }
    }

    for (i, (_, fired)) in zone_state.iter().enumerate() {
        if let Some(idx) = fired {
            incidents[*idx].magnitude = zone_excess[i];
        }
    }

    Trajectory {
        route_id: route.route_id.clone(),
        steps,
        terminal_reason: terminal,
        final_position_m: x,
        final_speed_mps: v,
        incidents,
    }
}
