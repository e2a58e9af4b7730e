//! The seeded demonstration fixture: ten evaluation routes, a 40-scenario
//! bank and a repair config. Everything is generated from fixed tables, so
//! the written files are stable across runs and platforms.

use std::path::Path;

use crate::bank::{ScenarioBank, ScenarioRecord};
use crate::error::{Error, Result};
use crate::harness::{save_routes, scenario_to_route, Route};
use crate::scenario::{Location, ScenarioAttributes, TimeOfDay, Weather};

pub const ROUTES_FILE: &str = "routes.jsonl";
pub const BANK_FILE: &str = "bank.jsonl";
pub const CONFIG_FILE: &str = "sera.toml";
pub const SEED: u64 = 1;

use Location::*;
use TimeOfDay::*;
use Weather::*;

type Row = (Weather, TimeOfDay, Location, &'static [&'static str]);

const EVAL: [(Row, u64); 10] = [
    ((Clear, Day, UrbanIntersection, &["red_light"]), 11),
    ((Clear, Night, UrbanIntersection, &["red_light"]), 12),
    ((Fog, Night, UrbanIntersection, &["stopped_lead_vehicle"]), 13),
    ((Fog, Day, Highway, &["stopped_lead_vehicle"]), 14),
    ((Clear, Night, Residential, &["occluded_pedestrian"]), 15),
    ((Rain, Dusk, MergeRamp, &["aggressive_cut_in"]), 16),
    ((Clear, Day, Highway, &[]), 17),
    ((Snow, Dawn, Residential, &["school_zone"]), 18),
    (
        (Rain, Night, UrbanIntersection, &["red_light", "stopped_lead_vehicle"]),
        19,
    ),
    ((Clear, Day, Roundabout, &["crossing_pedestrian"]), 20),
];

/// Scenarios related to the evaluation failures. Stopped-vehicle-in-fog
/// variants dominate, so a plain top-K leaves other failure kinds thin.
const RELATED: [Row; 14] = [
    (Fog, Night, UrbanIntersection, &["stopped_lead_vehicle"]),
    (Fog, Day, UrbanIntersection, &["stopped_lead_vehicle"]),
    (Fog, Dusk, UrbanIntersection, &["stopped_lead_vehicle"]),
    (Fog, Night, Highway, &["stopped_lead_vehicle"]),
    (Fog, Day, Highway, &["stopped_lead_vehicle"]),
    (Fog, Night, Residential, &["stopped_lead_vehicle"]),
    (Fog, Day, Residential, &["stopped_lead_vehicle"]),
    (Clear, Night, UrbanIntersection, &["red_light"]),
    (Rain, Night, UrbanIntersection, &["red_light"]),
    (Clear, Day, UrbanIntersection, &["red_light"]),
    (Clear, Dusk, Roundabout, &["red_light"]),
    (Rain, Night, Roundabout, &["traffic_light"]),
    (Clear, Night, Residential, &["occluded_pedestrian"]),
    (Snow, Dawn, Residential, &["school_zone"]),
];

/// Scenarios unrelated to the evaluation failures.
const DISTRACTORS: [Row; 26] = [
    (Clear, Day, Highway, &[]),
    (Clear, Dawn, Highway, &[]),
    (Clear, Dusk, Highway, &[]),
    (Rain, Day, Highway, &[]),
    (Rain, Dawn, Highway, &[]),
    (Snow, Day, Highway, &[]),
    (Snow, Dusk, Highway, &[]),
    (Clear, Day, Roundabout, &[]),
    (Clear, Dawn, Roundabout, &[]),
    (Rain, Day, Roundabout, &[]),
    (Snow, Dusk, Roundabout, &[]),
    (Clear, Day, MergeRamp, &[]),
    (Clear, Dawn, MergeRamp, &[]),
    (Rain, Dawn, MergeRamp, &[]),
    (Snow, Day, MergeRamp, &[]),
    (Clear, Day, Residential, &[]),
    (Rain, Dusk, Residential, &[]),
    (Snow, Day, Residential, &[]),
    (Clear, Dusk, Residential, &[]),
    (Rain, Day, UrbanIntersection, &[]),
    (Clear, Day, UrbanIntersection, &[]),
    (Clear, Dawn, UrbanIntersection, &[]),
    (Rain, Dusk, UrbanIntersection, &[]),
    (Snow, Day, UrbanIntersection, &[]),
    (Clear, Dusk, MergeRamp, &[]),
    (Rain, Dusk, Highway, &[]),
];

fn attrs(row: &Row) -> ScenarioAttributes {
    let (w, t, l, tags) = *row;
    ScenarioAttributes::new(w, t, l, tags.iter().copied()).expect("fixture rows are valid")
}

/// The ten evaluation routes, `r01` to `r10`.
pub fn eval_routes() -> Vec<Route> {
    EVAL.iter()
        .enumerate()
        .map(|(i, (row, seed))| {
            let id = format!("r{:02}", i + 1);
            let mut route = scenario_to_route(&ScenarioRecord::new(id.clone(), attrs(row)), *seed);
            route.route_id = id;
            route
        })
        .collect()
}

/// The 40-scenario bank, ids `s0001` to `s0040` in table order.
pub fn scenario_bank() -> ScenarioBank {
    let mut bank = ScenarioBank::new();
    let report = bank
        .ingest(RELATED.iter().chain(DISTRACTORS.iter()).map(attrs))
        .expect("fixture rows ingest");
    debug_assert_eq!(report.added, 40);
    bank
}

pub fn config_toml() -> String {
    format!(
        "# Repair configuration for the seeded demonstration fixture.\n\
         routes = \"{ROUTES_FILE}\"\n\
         bank = \"{BANK_FILE}\"\n\
         k = 8\n\
         analyzer = \"rules\"\n\
         reflection = \"rules\"\n\
         selection = \"full\"\n\
         granularity = \"batch\"\n\
         learning_rate = 0.05\n\
         max_grad_steps = 200\n\
         fd_step = 0.001\n\
         max_grad_norm = 10.0\n\
         episodes_per_scenario = 3\n\
         tau_cov = 0.25\n\
         tau_dup = 0.9\n\
         seed = {SEED}\n"
    )
}

/// Writes routes, bank and config into `dir`.
pub fn write_fixture(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_routes(&dir.join(ROUTES_FILE), &eval_routes())?;
    scenario_bank().save(&dir.join(BANK_FILE))?;
    let cfg = dir.join(CONFIG_FILE);
    std::fs::write(&cfg, config_toml()).map_err(|e| Error::io(&cfg, e))
}
