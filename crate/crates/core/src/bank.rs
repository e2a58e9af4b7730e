//! The scenario bank: a JSON-Lines repository of described scenarios.
//!
//! Records are keyed by `scenario_id` and deduplicated by a 64-bit hash of
//! their canonical attribute serialization. Iteration is always in ascending
//! id order so that scoring downstream is deterministic.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use twox_hash::XxHash64;

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::scenario::{describe, Provenance, ScenarioAttributes, ScenarioText};

/// Hex form of the 64-bit content hash of `attrs`.
pub fn content_hash(attrs: &ScenarioAttributes) -> String {
    format!("{:016x}", XxHash64::oneshot(0, attrs.canonical_json().as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRecord {
    pub scenario_id: String,
    pub attributes: ScenarioAttributes,
    pub text: ScenarioText,
    pub embedding: Option<Vec<f64>>,
    pub embedder_fingerprint: Option<String>,
    pub content_hash: String,
}

impl ScenarioRecord {
    /// Record with template text and no cached embedding.
    pub fn new(scenario_id: impl Into<String>, attributes: ScenarioAttributes) -> Self {
        let text = describe(&attributes);
        Self::with_text(scenario_id, attributes, text)
    }

    pub fn with_text(scenario_id: impl Into<String>, attributes: ScenarioAttributes, text: ScenarioText) -> Self {
        let content_hash = content_hash(&attributes);
        Self {
            scenario_id: scenario_id.into(),
            attributes,
            text,
            embedding: None,
            embedder_fingerprint: None,
            content_hash,
        }
    }

    /// Cached embedding, if it was produced by `embedder`.
    pub fn cached_embedding(&self, embedder: &Embedder) -> Option<&[f64]> {
        match (&self.embedding, &self.embedder_fingerprint) {
            (Some(v), Some(fp)) if *fp == embedder.fingerprint() => Some(v),
            _ => None,
        }
    }
}

/// Input to [`ScenarioBank::ingest`]. Missing ids and texts are filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDraft {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_id: Option<String>,
    pub attributes: ScenarioAttributes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<ScenarioText>,
}

impl From<ScenarioAttributes> for ScenarioDraft {
    fn from(attributes: ScenarioAttributes) -> Self {
        Self {
            scenario_id: None,
            attributes,
            text: None,
        }
    }
}

impl From<ScenarioRecord> for ScenarioDraft {
    fn from(r: ScenarioRecord) -> Self {
        Self {
            scenario_id: Some(r.scenario_id),
            attributes: r.attributes,
            text: Some(r.text),
        }
    }
}

/// Reads ingest drafts, one JSON object per line.
pub fn load_drafts(path: &Path) -> Result<Vec<ScenarioDraft>> {
    crate::harness::read_jsonl(path, |_, _: &ScenarioDraft| Ok(()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct IngestReport {
    pub added: usize,
    pub deduped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankStats {
    pub records: usize,
    pub with_embedding: usize,
    pub by_weather: BTreeMap<String, usize>,
    pub by_time: BTreeMap<String, usize>,
    pub by_location: BTreeMap<String, usize>,
    pub by_tag: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioBank {
    records: BTreeMap<String, ScenarioRecord>,
    by_hash: HashMap<String, String>,
    next_seq: usize,
}

impl ScenarioBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in ascending id order.
    pub fn scan(&self) -> impl ExactSizeIterator<Item = &ScenarioRecord> + Clone {
        self.records.values()
    }

    pub fn get(&self, id: &str) -> Result<&ScenarioRecord> {
        self.records
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("scenario {id}")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    fn next_id(&mut self) -> String {
        loop {
            self.next_seq += 1;
            let id = format!("s{:04}", self.next_seq);
            if !self.records.contains_key(&id) {
                return id;
            }
        }
    }

    /// Adds drafts, skipping any whose content hash is already present.
    pub fn ingest<I, D>(&mut self, drafts: I) -> Result<IngestReport>
    where
        I: IntoIterator<Item = D>,
        D: Into<ScenarioDraft>,
    {
        let mut report = IngestReport::default();
        for draft in drafts {
            let draft = draft.into();
            let hash = content_hash(&draft.attributes);
            if let Some(id) = &draft.scenario_id {
                if let Some(existing) = self.records.get(id) {
                    if existing.content_hash != hash {
                        return Err(Error::DuplicateId(id.clone()));
                    }
                }
            }
            if self.by_hash.contains_key(&hash) {
                report.deduped += 1;
                continue;
            }
            let id = match draft.scenario_id {
                Some(id) if !id.is_empty() => id,
                _ => self.next_id(),
            };
            let text = draft.text.unwrap_or_else(|| describe(&draft.attributes));
            let record = ScenarioRecord::with_text(id.clone(), draft.attributes, text);
            self.by_hash.insert(hash, id.clone());
            self.records.insert(id, record);
            report.added += 1;
        }
        Ok(report)
    }

    /// Computes missing or stale embeddings for `embedder`.
    pub fn refresh_embeddings(&mut self, embedder: &Embedder) -> Result<usize> {
        let fingerprint = embedder.fingerprint();
        let mut refreshed = 0;
        for record in self.records.values_mut() {
            if record.embedder_fingerprint.as_deref() == Some(fingerprint.as_str()) && record.embedding.is_some() {
                continue;
            }
            record.embedding = Some(embedder.embed(&record.text.text)?);
            record.embedder_fingerprint = Some(fingerprint.clone());
            refreshed += 1;
        }
        Ok(refreshed)
    }

    pub fn stats(&self) -> BankStats {
        let mut stats = BankStats {
            records: self.len(),
            with_embedding: 0,
            by_weather: BTreeMap::new(),
            by_time: BTreeMap::new(),
            by_location: BTreeMap::new(),
            by_tag: BTreeMap::new(),
        };
        for r in self.scan() {
            let a = &r.attributes;
            stats.with_embedding += usize::from(r.embedding.is_some());
            *stats.by_weather.entry(a.weather().surface().into()).or_default() += 1;
            *stats.by_time.entry(a.time().surface().into()).or_default() += 1;
            *stats.by_location.entry(a.location().surface().into()).or_default() += 1;
            for tag in a.scene_tags() {
                *stats.by_tag.entry(tag.clone()).or_default() += 1;
            }
        }
        stats
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for record in self.scan() {
            let line = serde_json::to_string(&BankLine::from(record)).expect("bank line serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bank = Self::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = parse_line(&line, line_no)?;
            if bank.records.contains_key(&record.scenario_id) {
                return Err(schema_error(
                    line_no,
                    "scenario_id",
                    format!("duplicate id {}", record.scenario_id),
                ));
            }
            if let Some(n) = record
                .scenario_id
                .strip_prefix('s')
                .and_then(|n| n.parse::<usize>().ok())
            {
                bank.next_seq = bank.next_seq.max(n);
            }
            bank.by_hash
                .insert(record.content_hash.clone(), record.scenario_id.clone());
            bank.records.insert(record.scenario_id.clone(), record);
        }
        Ok(bank)
    }
}

/// On-disk line layout; field order is the file's key order.
#[derive(Serialize)]
struct BankLine<'a> {
    scenario_id: &'a str,
    attributes: &'a ScenarioAttributes,
    text: &'a str,
    provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<&'a [f64]>,
    content_hash: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedder_fingerprint: Option<&'a str>,
}

impl<'a> From<&'a ScenarioRecord> for BankLine<'a> {
    fn from(r: &'a ScenarioRecord) -> Self {
        Self {
            scenario_id: &r.scenario_id,
            attributes: &r.attributes,
            text: &r.text.text,
            provenance: r.text.provenance,
            embedding: r.embedding.as_deref(),
            content_hash: &r.content_hash,
            embedder_fingerprint: r.embedder_fingerprint.as_deref(),
        }
    }
}

fn schema_error(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::SchemaError {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn field<T: serde::de::DeserializeOwned>(obj: &mut Map<String, Value>, name: &str, line: usize) -> Result<T> {
    let value = obj
        .remove(name)
        .ok_or_else(|| schema_error(line, name, "missing field"))?;
    serde_json::from_value(value).map_err(|e| schema_error(line, name, e.to_string()))
}

fn optional_field<T: serde::de::DeserializeOwned>(
    obj: &mut Map<String, Value>,
    name: &str,
    line: usize,
) -> Result<Option<T>> {
    match obj.remove(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| schema_error(line, name, e.to_string())),
    }
}

fn parse_line(line: &str, line_no: usize) -> Result<ScenarioRecord> {
    let mut obj: Map<String, Value> =
        serde_json::from_str(line).map_err(|e| schema_error(line_no, "<line>", e.to_string()))?;
    let scenario_id: String = field(&mut obj, "scenario_id", line_no)?;
    if scenario_id.is_empty() {
        return Err(schema_error(line_no, "scenario_id", "empty id"));
    }
    let attributes: ScenarioAttributes = field(&mut obj, "attributes", line_no)?;
    let text: String = field(&mut obj, "text", line_no)?;
    if text.is_empty() {
        return Err(schema_error(line_no, "text", "empty text"));
    }
    let provenance: Provenance = field(&mut obj, "provenance", line_no)?;
    let embedding: Option<Vec<f64>> = optional_field(&mut obj, "embedding", line_no)?;
    if let Some(v) = &embedding {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(schema_error(line_no, "embedding", format!("norm {norm} is not 1")));
        }
    }
    let hash: String = field(&mut obj, "content_hash", line_no)?;
    if hash != content_hash(&attributes) {
        return Err(schema_error(line_no, "content_hash", "does not match attributes"));
    }
    let embedder_fingerprint: Option<String> = optional_field(&mut obj, "embedder_fingerprint", line_no)?;
    if let Some(extra) = obj.keys().next() {
        return Err(schema_error(line_no, extra, "unknown field"));
    }
    Ok(ScenarioRecord {
        scenario_id,
        attributes,
        text: ScenarioText { text, provenance },
        embedding,
        embedder_fingerprint,
        content_hash: hash,
    })
}
