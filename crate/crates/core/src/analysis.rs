//! Failure-pattern extraction from performance logs.
//!
//! The rule extractor groups infraction events by (kind, weather, time of day)
//! and renders one pattern per group. The LLM extractor asks the gateway for
//! patterns and checks every evidence reference against the logs.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{HazardKind, InfractionKind, PerformanceLog};
use crate::llm::{LlmClient, LlmTask, TaskKind};
use crate::scenario::{Location, TimeOfDay, Weather};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    Collision,
    TrafficSignalViolation,
    RouteDeviation,
    Speeding,
}

impl FailureCategory {
    pub fn of(kind: InfractionKind) -> Self {
        match kind {
            InfractionKind::Collision => FailureCategory::Collision,
            InfractionKind::RedLight => FailureCategory::TrafficSignalViolation,
            InfractionKind::RouteDeviation => FailureCategory::RouteDeviation,
            InfractionKind::Speeding => FailureCategory::Speeding,
        }
    }

    pub fn severity(self) -> u8 {
        match self {
            FailureCategory::Collision => 3,
            FailureCategory::TrafficSignalViolation => 2,
            FailureCategory::RouteDeviation | FailureCategory::Speeding => 1,
        }
    }

    fn slug(self) -> &'static str {
        match self {
            FailureCategory::Collision => "collision",
            FailureCategory::TrafficSignalViolation => "traffic_signal_violation",
            FailureCategory::RouteDeviation => "route_deviation",
            FailureCategory::Speeding => "speeding",
        }
    }
}

/// The conditions a pattern is tied to; absent fields are not implicated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather: Option<Weather>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<TimeOfDay>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub route_id: String,
    pub event_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailurePattern {
    pub pattern_id: String,
    pub category: FailureCategory,
    #[serde(default)]
    pub context: PatternContext,
    /// Natural-language form of the pattern; this is the text scored against scenarios.
    pub description: String,
    pub evidence: Vec<EvidenceRef>,
    pub severity: u8,
}

/// Whether patterns are mined per route or over the whole log set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerRoute,
    Global,
}

fn join_phrases(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => (*one).to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn describe_group(
    category: FailureCategory,
    weather: Weather,
    time: TimeOfDay,
    hazards: &BTreeSet<HazardKind>,
) -> String {
    let conditions = format!("in {} at {}", weather.surface(), time.surface());
    match category {
        FailureCategory::Collision => {
            let what: Vec<&str> = hazards.iter().map(|h| h.phrase()).collect();
            if what.is_empty() {
                format!("collision {conditions}")
            } else {
                format!("collision with {} {conditions}", join_phrases(&what))
            }
        }
        FailureCategory::TrafficSignalViolation => format!("ran a red light at a traffic light {conditions}"),
        FailureCategory::RouteDeviation => format!("route deviation after failing to complete the route {conditions}"),
        FailureCategory::Speeding => format!("speeding through a school zone {conditions}"),
    }
}

/// Deterministic extractor: one pattern per non-empty (kind, weather, time)
/// group, sorted by (category, weather, time).
pub fn extract_patterns_rules(logs: &[PerformanceLog]) -> Vec<FailurePattern> {
    type Key = (FailureCategory, Weather, TimeOfDay);
    let mut groups: BTreeMap<Key, (BTreeSet<EvidenceRef>, BTreeSet<HazardKind>)> = BTreeMap::new();
    for log in logs {
        let (weather, time) = (log.conditions.weather(), log.conditions.time());
        for (idx, event) in log.events.iter().enumerate() {
            let entry = groups
                .entry((FailureCategory::of(event.kind), weather, time))
                .or_default();
            entry.0.insert(EvidenceRef {
                route_id: log.route_id.clone(),
                event_index: idx,
            });
            if let Some(h) = event.hazard {
                entry.1.insert(h);
            }
        }
    }
    groups
        .into_iter()
        .map(|((category, weather, time), (evidence, hazards))| FailurePattern {
            pattern_id: format!("{}/{}/{}", category.slug(), weather.surface(), time.surface()),
            category,
            context: PatternContext {
                weather: Some(weather),
                time: Some(time),
                location: None,
            },
            description: describe_group(category, weather, time, &hazards),
            evidence: evidence.into_iter().collect(),
            severity: category.severity(),
        })
        .collect()
}

#[derive(Serialize)]
struct LogDigest<'a> {
    route_id: &'a str,
    conditions: &'a crate::scenario::ScenarioAttributes,
    route_completion_fraction: f64,
    events: Vec<EventDigest<'a>>,
}

#[derive(Serialize)]
struct EventDigest<'a> {
    event_index: usize,
    kind: InfractionKind,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    hazard: Option<HazardKind>,
}

#[derive(Deserialize)]
struct AnalyzeResponse {
    patterns: Vec<FailurePattern>,
}

/// LLM extractor. Returns an empty list for empty logs without calling the LLM.
pub fn extract_patterns_llm(logs: &[PerformanceLog], llm: &LlmClient) -> Result<Vec<FailurePattern>> {
    if logs.is_empty() {
        return Ok(Vec::new());
    }
    let digest: Vec<LogDigest> = logs
        .iter()
        .map(|l| LogDigest {
            route_id: &l.route_id,
            conditions: &l.conditions,
            route_completion_fraction: l.route_completion_fraction,
            events: l
                .events
                .iter()
                .enumerate()
                .map(|(i, e)| EventDigest {
                    event_index: i,
                    kind: e.kind,
                    message: &e.message,
                    hazard: e.hazard,
                })
                .collect(),
        })
        .collect();
    let task = LlmTask::new(TaskKind::Analyze, &serde_json::json!({ "logs": digest }));
    let response: AnalyzeResponse =
        serde_json::from_value(llm.complete(&task)?).map_err(|e| Error::MalformedLlmOutput(e.to_string()))?;
    validate_patterns(&response.patterns, logs)?;
    Ok(response.patterns)
}

/// Checks id uniqueness, non-empty text and evidence, and that evidence
/// resolves to events in `logs`.
pub fn validate_patterns(patterns: &[FailurePattern], logs: &[PerformanceLog]) -> Result<()> {
    let events: BTreeMap<&str, usize> = logs.iter().map(|l| (l.route_id.as_str(), l.events.len())).collect();
    let mut ids = HashSet::new();
    for p in patterns {
        if !ids.insert(p.pattern_id.as_str()) {
            return Err(Error::MalformedLlmOutput(format!(
                "duplicate pattern id {}",
                p.pattern_id
            )));
        }
        if p.description.trim().is_empty() || p.evidence.is_empty() {
            return Err(Error::MalformedLlmOutput(format!(
                "pattern {} lacks description or evidence",
                p.pattern_id
            )));
        }
        if !(1..=3).contains(&p.severity) {
            return Err(Error::MalformedLlmOutput(format!(
                "pattern {} severity {}",
                p.pattern_id, p.severity
            )));
        }
        for ev in &p.evidence {
            match events.get(ev.route_id.as_str()) {
                Some(n) if ev.event_index < *n => {}
                _ => {
                    return Err(Error::MalformedLlmOutput(format!(
                        "pattern {} cites missing event {}#{}",
                        p.pattern_id, ev.route_id, ev.event_index
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Applies `extract` once over all logs, or once per route with pattern ids
/// prefixed by the route id. Per-route output follows log order.
pub fn extract_patterns<F>(
    logs: &[PerformanceLog],
    granularity: Granularity,
    mut extract: F,
) -> Result<Vec<FailurePattern>>
where
    F: FnMut(&[PerformanceLog]) -> Result<Vec<FailurePattern>>,
{
    match granularity {
        Granularity::Global => extract(logs),
        Granularity::PerRoute => {
            let mut out = Vec::new();
            for log in logs {
                for mut p in extract(std::slice::from_ref(log))? {
                    p.pattern_id = format!("{}:{}", log.route_id, p.pattern_id);
                    out.push(p);
                }
            }
            Ok(out)
        }
    }
}

pub fn load_patterns(path: &std::path::Path) -> Result<Vec<FailurePattern>> {
    crate::harness::read_jsonl(path, |_, _: &FailurePattern| Ok(()))
}

pub fn save_patterns(path: &std::path::Path, patterns: &[FailurePattern]) -> Result<()> {
    crate::harness::write_jsonl(path, patterns)
}
