//! Structured scenario attributes and the descriptor that renders them as text.
//!
//! A scenario is described by four attribute groups: weather, time of day,
//! location, and a set of scene tags (dynamic agents and infrastructure).
//! [`describe`] renders them with a fixed template so that the same attributes
//! always produce byte-identical text; [`paraphrase`] asks the LLM backend for a
//! richer rendering and can fall back to the template.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{LlmClient, LlmTask, TaskKind};

/// Longest accepted free-text note, in characters.
pub const MAX_NOTE_CHARS: usize = 280;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Rain,
    Fog,
    Snow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Day,
    Night,
    Dawn,
    Dusk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    UrbanIntersection,
    Highway,
    Roundabout,
    MergeRamp,
    Residential,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Clear, Weather::Rain, Weather::Fog, Weather::Snow];

    pub fn surface(self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::Rain => "rain",
            Weather::Fog => "fog",
            Weather::Snow => "snow",
        }
    }

    fn sentence(self) -> &'static str {
        match self {
            Weather::Clear => "The weather is clear.",
            Weather::Rain => "The road is wet under steady rain.",
            Weather::Fog => "Dense fog limits visibility.",
            Weather::Snow => "Falling snow covers the road.",
        }
    }
}

impl TimeOfDay {
    pub const ALL: [TimeOfDay; 4] = [TimeOfDay::Day, TimeOfDay::Night, TimeOfDay::Dawn, TimeOfDay::Dusk];

    pub fn surface(self) -> &'static str {
        match self {
            TimeOfDay::Day => "day",
            TimeOfDay::Night => "night",
            TimeOfDay::Dawn => "dawn",
            TimeOfDay::Dusk => "dusk",
        }
    }

    fn sentence(self) -> &'static str {
        match self {
            TimeOfDay::Day => "The drive takes place during the day.",
            TimeOfDay::Night => "The drive takes place at night.",
            TimeOfDay::Dawn => "The drive takes place at dawn.",
            TimeOfDay::Dusk => "The drive takes place at dusk.",
        }
    }
}

impl Location {
    pub const ALL: [Location; 5] = [
        Location::UrbanIntersection,
        Location::Highway,
        Location::Roundabout,
        Location::MergeRamp,
        Location::Residential,
    ];

    pub fn surface(self) -> &'static str {
        match self {
            Location::UrbanIntersection => "urban intersection",
            Location::Highway => "highway",
            Location::Roundabout => "roundabout",
            Location::MergeRamp => "merge ramp",
            Location::Residential => "residential",
        }
    }

    fn sentence(self) -> &'static str {
        match self {
            Location::UrbanIntersection => "The ego vehicle approaches an urban intersection.",
            Location::Highway => "The ego vehicle travels on a highway.",
            Location::Roundabout => "The ego vehicle enters a roundabout.",
            Location::MergeRamp => "The ego vehicle joins traffic from a merge ramp.",
            Location::Residential => "The ego vehicle drives through a residential street.",
        }
    }
}

macro_rules! display_surface {
    ($($ty:ty),*) => {$(
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.surface())
            }
        }
    )*};
}

display_surface!(Weather, TimeOfDay, Location);

/// Core semantic attributes of a scenario.
///
/// Construction normalizes `scene_tags` (sorted, deduplicated) and rejects
/// malformed tags or over-long notes, so every value of this type is valid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAttributes")]
pub struct ScenarioAttributes {
    weather: Weather,
    time: TimeOfDay,
    location: Location,
    scene_tags: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene_note: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttributes {
    weather: Weather,
    time: TimeOfDay,
    location: Location,
    #[serde(default)]
    scene_tags: Vec<String>,
    #[serde(default)]
    scene_note: Option<String>,
}

impl TryFrom<RawAttributes> for ScenarioAttributes {
    type Error = Error;

    fn try_from(raw: RawAttributes) -> Result<Self> {
        let attrs = ScenarioAttributes::new(raw.weather, raw.time, raw.location, raw.scene_tags)?;
        match raw.scene_note {
            Some(note) => attrs.with_note(note),
            None => Ok(attrs),
        }
    }
}

fn is_valid_tag(tag: &str) -> bool {
    !tag.is_empty()
        && tag
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl ScenarioAttributes {
    pub fn new<I, S>(weather: Weather, time: TimeOfDay, location: Location, tags: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut scene_tags: Vec<String> = tags.into_iter().map(Into::into).collect();
        if let Some(bad) = scene_tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(Error::InvalidAttributes(format!(
                "scene tag {bad:?} must be a non-empty lowercase token of [a-z0-9_]"
            )));
        }
        scene_tags.sort();
        scene_tags.dedup();
        Ok(Self {
            weather,
            time,
            location,
            scene_tags,
            scene_note: None,
        })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Result<Self> {
        let note = note.into();
        let trimmed = note.trim();
        if trimmed.is_empty() {
            return Err(Error::InvalidAttributes("scene note is blank".into()));
        }
        if trimmed.chars().count() > MAX_NOTE_CHARS {
            return Err(Error::InvalidAttributes(format!(
                "scene note exceeds {MAX_NOTE_CHARS} characters"
            )));
        }
        self.scene_note = Some(trimmed.to_string());
        Ok(self)
    }

    pub fn weather(&self) -> Weather {
        self.weather
    }

    pub fn time(&self) -> TimeOfDay {
        self.time
    }

    pub fn location(&self) -> Location {
        self.location
    }

    pub fn scene_tags(&self) -> &[String] {
        &self.scene_tags
    }

    pub fn scene_note(&self) -> Option<&str> {
        self.scene_note.as_deref()
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.scene_tags.binary_search_by(|t| t.as_str().cmp(tag)).is_ok()
    }

    /// Canonical serialization used for content hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("attributes always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Template,
    LlmParaphrase,
}

/// Rendered natural-language form of a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioText {
    pub text: String,
    pub provenance: Provenance,
}

/// Renders attributes with the fixed template: weather, time, location, then
/// scene tags (omitted when empty), then the note verbatim when present.
pub fn describe(attrs: &ScenarioAttributes) -> ScenarioText {
    let mut sentences = vec![
        attrs.weather.sentence().to_string(),
        attrs.time.sentence().to_string(),
        attrs.location.sentence().to_string(),
    ];
    if !attrs.scene_tags.is_empty() {
        let tags: Vec<String> = attrs.scene_tags.iter().map(|t| t.replace('_', " ")).collect();
        sentences.push(format!("The scene contains: {}.", tags.join(", ")));
    }
    if let Some(note) = &attrs.scene_note {
        sentences.push(note.clone());
    }
    ScenarioText {
        text: sentences.join(" "),
        provenance: Provenance::Template,
    }
}

#[derive(Deserialize)]
struct ParaphraseResponse {
    text: String,
}

/// Asks the LLM for a richer description. With `fallback` set, any LLM failure
/// yields the template rendering instead of an error.
pub fn paraphrase(attrs: &ScenarioAttributes, llm: &LlmClient, fallback: bool) -> Result<ScenarioText> {
    let result = (|| {
        let payload = serde_json::json!({
            "attributes": attrs,
            "template_description": describe(attrs).text,
        });
        let task = LlmTask::new(TaskKind::Paraphrase, &payload);
        let value = llm.complete(&task)?;
        let response: ParaphraseResponse =
            serde_json::from_value(value).map_err(|e| Error::MalformedLlmOutput(e.to_string()))?;
        let text = response.text.trim().to_string();
        if text.is_empty() {
            return Err(Error::MalformedLlmOutput("paraphrase text is empty".into()));
        }
        Ok(ScenarioText {
            text,
            provenance: Provenance::LlmParaphrase,
        })
    })();
    match result {
        Err(err) if fallback => {
            log::warn!("paraphrase failed, using template: {err}");
            Ok(describe(attrs))
        }
        other => other,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Inverse of [`describe`] for template text.
    pub(crate) fn parse_description(text: &str) -> Option<ScenarioAttributes> {
        let mut rest = text;
        let mut take = |options: Vec<(&'static str, usize)>| -> Option<usize> {
            for (sentence, idx) in options {
                if let Some(tail) = rest.strip_prefix(sentence) {
                    rest = tail.strip_prefix(' ').unwrap_or(tail);
                    return Some(idx);
                }
            }
            None
        };
        let w = take(
            Weather::ALL
                .iter()
                .enumerate()
                .map(|(i, w)| (w.sentence(), i))
                .collect(),
        )?;
        let t = take(
            TimeOfDay::ALL
                .iter()
                .enumerate()
                .map(|(i, t)| (t.sentence(), i))
                .collect(),
        )?;
        let l = take(
            Location::ALL
                .iter()
                .enumerate()
                .map(|(i, l)| (l.sentence(), i))
                .collect(),
        )?;
        let mut tags = Vec::new();
        if let Some(tail) = rest.strip_prefix("The scene contains: ") {
            let end = tail.find('.')?;
            tags = tail[..end].split(", ").map(|t| t.replace(' ', "_")).collect();
            rest = tail[end + 1..].strip_prefix(' ').unwrap_or(&tail[end + 1..]);
        }
        let attrs = ScenarioAttributes::new(Weather::ALL[w], TimeOfDay::ALL[t], Location::ALL[l], tags).ok()?;
        if rest.is_empty() {
            Some(attrs)
        } else {
            attrs.with_note(rest).ok()
        }
    }

    pub(crate) fn arb_attributes() -> impl Strategy<Value = ScenarioAttributes> {
        let tag = prop::sample::select(vec![
            "occluded_pedestrian",
            "aggressive_cut_in",
            "stopped_lead_vehicle",
            "red_light",
            "school_zone",
            "crossing_pedestrian",
            "construction",
        ]);
        (
            0usize..4,
            0usize..4,
            0usize..5,
            prop::collection::vec(tag, 0..4),
            prop::option::of("[A-Za-z][A-Za-z ,]{0,40}[a-z]"),
        )
            .prop_map(|(w, t, l, tags, note)| {
                let attrs =
                    ScenarioAttributes::new(Weather::ALL[w], TimeOfDay::ALL[t], Location::ALL[l], tags).unwrap();
                match note {
                    Some(n) => attrs.with_note(n).unwrap(),
                    None => attrs,
                }
            })
    }

    #[test]
    fn fog_night_intersection_mentions_every_attribute() {
        let attrs = ScenarioAttributes::new(
            Weather::Fog,
            TimeOfDay::Night,
            Location::UrbanIntersection,
            ["occluded_pedestrian"],
        )
        .unwrap();
        let text = describe(&attrs);
        assert_eq!(text.provenance, Provenance::Template);
        for word in ["fog", "night", "urban intersection", "occluded pedestrian"] {
            assert!(text.text.contains(word), "{word} missing from {}", text.text);
        }
    }

    #[test]
    fn empty_scene_sentence_is_omitted() {
        let attrs =
            ScenarioAttributes::new(Weather::Clear, TimeOfDay::Day, Location::Highway, Vec::<String>::new()).unwrap();
        let text = describe(&attrs).text;
        assert!(!text.contains("scene"));
        assert_eq!(text.matches('.').count(), 3);
    }

    #[test]
    fn note_is_appended_verbatim() {
        let attrs = ScenarioAttributes::new(
            Weather::Rain,
            TimeOfDay::Dusk,
            Location::MergeRamp,
            ["aggressive_cut_in"],
        )
        .unwrap()
        .with_note("A truck merges late.")
        .unwrap();
        assert!(describe(&attrs).text.ends_with(" A truck merges late."));
    }

    #[test]
    fn tags_are_sorted_and_deduplicated() {
        let attrs = ScenarioAttributes::new(
            Weather::Snow,
            TimeOfDay::Dawn,
            Location::Roundabout,
            ["red_light", "aggressive_cut_in", "red_light"],
        )
        .unwrap();
        assert_eq!(attrs.scene_tags(), ["aggressive_cut_in", "red_light"]);
    }

    #[test]
    fn rejects_bad_tags_and_long_notes() {
        assert!(ScenarioAttributes::new(Weather::Snow, TimeOfDay::Dawn, Location::Roundabout, ["Red Light"]).is_err());
        assert!(ScenarioAttributes::new(Weather::Snow, TimeOfDay::Dawn, Location::Roundabout, [""]).is_err());
        let ok = ScenarioAttributes::new(
            Weather::Snow,
            TimeOfDay::Dawn,
            Location::Roundabout,
            Vec::<String>::new(),
        )
        .unwrap();
        assert!(ok.clone().with_note("x".repeat(MAX_NOTE_CHARS + 1)).is_err());
        assert!(ok.with_note("x".repeat(MAX_NOTE_CHARS)).is_ok());
    }

    #[test]
    fn deserialization_enforces_invariants() {
        let json = r#"{"weather":"fog","time":"night","location":"highway","scene_tags":["b_tag","a_tag","a_tag"]}"#;
        let attrs: ScenarioAttributes = serde_json::from_str(json).unwrap();
        assert_eq!(attrs.scene_tags(), ["a_tag", "b_tag"]);
        let unknown = r#"{"weather":"hail","time":"night","location":"highway"}"#;
        assert!(serde_json::from_str::<ScenarioAttributes>(unknown).is_err());
        let missing = r#"{"time":"night","location":"highway"}"#;
        assert!(serde_json::from_str::<ScenarioAttributes>(missing).is_err());
    }

    proptest! {
        #[test]
        fn describe_is_deterministic(attrs in arb_attributes()) {
            prop_assert_eq!(describe(&attrs), describe(&attrs.clone()));
        }

        #[test]
        fn describe_covers_every_attribute(attrs in arb_attributes()) {
            let text = describe(&attrs).text.to_lowercase();
            prop_assert!(text.contains(attrs.weather().surface()));
            prop_assert!(text.contains(attrs.time().surface()));
            prop_assert!(text.contains(attrs.location().surface()));
            for tag in attrs.scene_tags() {
                prop_assert!(text.contains(&tag.replace('_', " ")));
            }
        }

        #[test]
        fn describe_round_trips(attrs in arb_attributes()) {
            prop_assert_eq!(parse_description(&describe(&attrs).text), Some(attrs));
        }
    }
}
