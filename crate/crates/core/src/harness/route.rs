use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DEFAULT_ROUTE_LENGTH_M, DEFAULT_TIME_LIMIT_STEPS, FOG_RANGE_FACTOR, SENSING_RANGE_M};
use crate::bank::ScenarioRecord;
use crate::error::{Error, Result};
use crate::scenario::{Location, ScenarioAttributes, TimeOfDay, Weather};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HazardKind {
    TrafficLight,
    StoppedLeadVehicle,
    CrossingPedestrian,
    SpeedZone,
}

impl HazardKind {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Words used when a hazard is mentioned in text.
    pub fn phrase(self) -> &'static str {
        match self {
            HazardKind::TrafficLight => "red light",
            HazardKind::StoppedLeadVehicle => "stopped lead vehicle",
            HazardKind::CrossingPedestrian => "crossing pedestrian",
            HazardKind::SpeedZone => "school zone",
        }
    }
}

/// Kind-specific hazard parameters, tagged by `kind` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HazardSpec {
    /// Red while `(t + phase_offset_s) mod cycle_s < red_s`.
    TrafficLight {
        phase_offset_s: f64,
        cycle_s: f64,
        red_s: f64,
    },
    /// Blocks the lane until `departs_after_s`, then pulls away.
    StoppedLeadVehicle {
        departs_after_s: f64,
    },
    /// Hidden until the ego vehicle is within `trigger_distance_m`, then
    /// occupies the crossing for `crossing_s`.
    CrossingPedestrian {
        trigger_distance_m: f64,
        crossing_s: f64,
    },
    SpeedZone {
        zone_length_m: f64,
        limit_mps: f64,
    },
}

impl HazardSpec {
    pub fn kind(&self) -> HazardKind {
        match self {
            HazardSpec::TrafficLight { .. } => HazardKind::TrafficLight,
            HazardSpec::StoppedLeadVehicle { .. } => HazardKind::StoppedLeadVehicle,
            HazardSpec::CrossingPedestrian { .. } => HazardKind::CrossingPedestrian,
            HazardSpec::SpeedZone { .. } => HazardKind::SpeedZone,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        match *self {
            HazardSpec::TrafficLight {
                phase_offset_s,
                cycle_s,
                red_s,
            } => {
                positive("cycle_s", cycle_s)?;
                if !(phase_offset_s.is_finite() && (0.0..=cycle_s).contains(&red_s)) {
                    return Err("red_s must lie in [0, cycle_s]".into());
                }
                Ok(())
            }
            HazardSpec::StoppedLeadVehicle { departs_after_s } => positive("departs_after_s", departs_after_s),
            HazardSpec::CrossingPedestrian {
                trigger_distance_m,
                crossing_s,
            } => {
                positive("trigger_distance_m", trigger_distance_m)?;
                positive("crossing_s", crossing_s)
            }
            HazardSpec::SpeedZone {
                zone_length_m,
                limit_mps,
            } => {
                positive("zone_length_m", zone_length_m)?;
                positive("limit_mps", limit_mps)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hazard {
    pub position_m: f64,
    #[serde(flatten)]
    pub spec: HazardSpec,
}

impl Hazard {
    pub fn kind(&self) -> HazardKind {
        self.spec.kind()
    }
}

/// A pre-evaluation or training route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub route_id: String,
    #[serde(default = "default_length")]
    pub length_m: f64,
    pub conditions: ScenarioAttributes,
    #[serde(default)]
    pub hazards: Vec<Hazard>,
    #[serde(default = "default_time_limit")]
    pub time_limit_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_length() -> f64 {
    DEFAULT_ROUTE_LENGTH_M
}

fn default_time_limit() -> usize {
    DEFAULT_TIME_LIMIT_STEPS
}

impl Route {
    pub fn new(route_id: impl Into<String>, conditions: ScenarioAttributes, hazards: Vec<Hazard>) -> Result<Self> {
        let route = Self {
            route_id: route_id.into(),
            length_m: DEFAULT_ROUTE_LENGTH_M,
            conditions,
            hazards,
            time_limit_steps: DEFAULT_TIME_LIMIT_STEPS,
            seed: 0,
        };
        route.validate()?;
        Ok(route)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidRoute {
            route_id: self.route_id.clone(),
            reason,
        };
        if !(self.length_m.is_finite() && self.length_m > 0.0) {
            return Err(fail(format!("length_m must be positive, got {}", self.length_m)));
        }
        if self.time_limit_steps == 0 {
            return Err(fail("time_limit_steps must be positive".into()));
        }
        let mut prev = 0.0;
        for (i, h) in self.hazards.iter().enumerate() {
            if !(h.position_m > prev && h.position_m < self.length_m) {
                return Err(fail(format!(
                    "hazard {i} at {} must be strictly after {prev} and inside (0, {})",
                    h.position_m, self.length_m
                )));
            }
            h.spec.check().map_err(|r| fail(format!("hazard {i}: {r}")))?;
            prev = h.position_m;
        }
        Ok(())
    }

    /// Forward sensing range; halved in fog.
    pub fn sensing_range_m(&self) -> f64 {
        if self.conditions.weather() == Weather::Fog {
            SENSING_RANGE_M * FOG_RANGE_FACTOR
        } else {
            SENSING_RANGE_M
        }
    }
}

pub fn load_routes(path: &Path) -> Result<Vec<Route>> {
    read_jsonl(path, |line_no, route: &Route| {
        route.validate().map_err(|e| Error::SchemaError {
            line: line_no,
            field: "hazards".into(),
            message: e.to_string(),
        })
    })
}

pub fn save_routes(path: &Path, routes: &[Route]) -> Result<()> {
    write_jsonl(path, routes)
}

/// Reads a JSON-Lines file, skipping blank lines. `check` sees each item with
/// its 1-based line number.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    check: impl Fn(usize, &T) -> Result<()>,
) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| Error::SchemaError {
            line: idx + 1,
            field: field_from_serde(&e.to_string()),
            message: e.to_string(),
        })?;
        check(idx + 1, &item)?;
        out.push(item);
    }
    Ok(out)
}

/// Best-effort field name from a serde error message.
fn field_from_serde(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .filter(|_| message.contains("field"))
        .unwrap_or("<line>")
        .to_string()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Hazard slot positions for each location's road layout.
fn layout_slots(location: Location) -> [f64; 3] {
    match location {
        Location::UrbanIntersection => [45.0, 95.0, 125.0],
        Location::Highway => [60.0, 105.0, 135.0],
        Location::Roundabout => [40.0, 85.0, 125.0],
        Location::MergeRamp => [50.0, 100.0, 130.0],
        Location::Residential => [35.0, 80.0, 120.0],
    }
}

fn hazard_for_tag(tag: &str) -> Option<HazardKind> {
    match tag {
        "red_light" | "traffic_light" => Some(HazardKind::TrafficLight),
        "stopped_lead_vehicle" | "aggressive_cut_in" | "stalled_vehicle" => Some(HazardKind::StoppedLeadVehicle),
        "occluded_pedestrian" | "crossing_pedestrian" | "jaywalker" => Some(HazardKind::CrossingPedestrian),
        "school_zone" | "speed_zone" | "construction" => Some(HazardKind::SpeedZone),
        _ => None,
    }
}

/// Light timing as `(phase offset range, cycle, red duration)`. A `red_light`
/// tag starts at most 4 s into a 25 s red phase, so the light is still red
/// when a vehicle reaches the first slot even at a crawl; other light tags
/// draw a uniform phase of a 20 s cycle.
fn light_timing(tag: &str) -> (std::ops::Range<f64>, f64, f64) {
    if tag == "red_light" {
        (0.0..4.0, 40.0, 25.0)
    } else {
        (0.0..20.0, 20.0, 10.0)
    }
}

pub const PEDESTRIAN_TRIGGER_DAY_M: f64 = 35.0;
pub const PEDESTRIAN_TRIGGER_NIGHT_M: f64 = 18.0;

/// Turns a bank scenario into an executable route.
///
/// The location picks the slot layout, each recognized scene tag fills the next
/// slot with a hazard, and `seed` jitters positions and timings. Weather and
/// time never influence the random draws, so two records that differ only in
/// conditions get identical hazard layouts.
pub fn scenario_to_route(record: &ScenarioRecord, seed: u64) -> Route {
    let attrs = &record.attributes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = layout_slots(attrs.location());
    let kinds = attrs
        .scene_tags()
        .iter()
        .filter_map(|t| hazard_for_tag(t).map(|k| (t.as_str(), k)));
    let hazards = kinds
        .zip(slots)
        .map(|((tag, kind), slot)| {
            let position_m = slot + rng.gen_range(-4.0..4.0);
            let spec = match kind {
                HazardKind::TrafficLight => {
                    let (phase, cycle_s, red_s) = light_timing(tag);
                    HazardSpec::TrafficLight {
                        phase_offset_s: rng.gen_range(phase),
                        cycle_s,
                        red_s,
                    }
                }
                HazardKind::StoppedLeadVehicle => HazardSpec::StoppedLeadVehicle {
                    departs_after_s: rng.gen_range(10.0..16.0),
                },
                HazardKind::CrossingPedestrian => HazardSpec::CrossingPedestrian {
                    trigger_distance_m: pedestrian_trigger(attrs),
                    crossing_s: 4.0,
                },
                HazardKind::SpeedZone => HazardSpec::SpeedZone {
                    zone_length_m: 30.0,
                    limit_mps: 8.0,
                },
            };
            Hazard { position_m, spec }
        })
        .collect();
    Route {
        route_id: format!("{}@{seed}", record.scenario_id),
        length_m: DEFAULT_ROUTE_LENGTH_M,
        conditions: attrs.clone(),
        hazards,
        time_limit_steps: DEFAULT_TIME_LIMIT_STEPS,
        seed,
    }
}

pub fn pedestrian_trigger(attrs: &ScenarioAttributes) -> f64 {
    if attrs.time() == TimeOfDay::Night {
        PEDESTRIAN_TRIGGER_NIGHT_M
    } else {
        PEDESTRIAN_TRIGGER_DAY_M
    }
}
