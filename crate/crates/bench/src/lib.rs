//! Shared inputs for the benchmarks.

use sera_core::analysis::extract_patterns_rules;
use sera_core::harness::pre_evaluate;
use sera_core::{fixture, FailurePattern, PolicyParams, ScenarioBank};

/// Failure patterns of the shipped baseline on the demonstration routes.
pub fn baseline_patterns() -> Vec<FailurePattern> {
    let logs = pre_evaluate(&PolicyParams::baseline(), &fixture::eval_routes())
        .expect("fixture routes evaluate")
        .logs;
    extract_patterns_rules(&logs)
}

/// A bank of `n` distinct scenarios: the demonstration bank, topped up with
/// attribute combinations that are not in it yet.
pub fn bank_of(n: usize) -> ScenarioBank {
    use sera_core::scenario::{Location, TimeOfDay, Weather};
    const TAGS: [&str; 6] = [
        "stopped_lead_vehicle",
        "red_light",
        "occluded_pedestrian",
        "school_zone",
        "aggressive_cut_in",
        "heavy_traffic",
    ];
    let mut bank = fixture::scenario_bank();
    'outer: for w in Weather::ALL {
        for t in TimeOfDay::ALL {
            for l in Location::ALL {
                for mask in 0u32..(1 << TAGS.len()) {
                    if bank.len() >= n {
                        break 'outer;
                    }
                    let tags = TAGS
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask & (1 << i) != 0)
                        .map(|(_, t)| *t);
                    let attrs = sera_core::ScenarioAttributes::new(w, t, l, tags).expect("valid attributes");
                    bank.ingest([attrs]).expect("ingest");
                }
            }
        }
    }
    bank
}
