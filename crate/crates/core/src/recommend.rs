//! Failure-aware retrieval, reflection and refinement.
//!
//! `recommend` picks the K scenarios with the highest mean similarity to the
//! failure patterns. Reflection (rules or LLM) audits that set and proposes
//! replace / augment / prioritize edits, which `refine` applies to produce the
//! final training set with reflection-boosted scores.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::FailurePattern;
use crate::bank::{ScenarioBank, ScenarioRecord};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::llm::{LlmClient, LlmTask, TaskKind};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_TAU_COV: f64 = 0.25;
pub const DEFAULT_TAU_DUP: f64 = 0.9;
/// Relevance boost for prioritized members.
pub const PRIORITY_BETA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternScore {
    pub pattern_id: String,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub scenario_id: String,
    pub relevance: f64,
    pub per_pattern: Vec<PatternScore>,
}

/// Arithmetic mean of the similarities. Values are summed in sorted order so
/// the result does not depend on pattern order.
fn mean_phi(per_pattern: &[PatternScore]) -> f64 {
    let mut values: Vec<f64> = per_pattern.iter().map(|p| p.phi).collect();
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores every bank record with an arbitrary similarity function, in scan order.
pub fn score_with<F>(bank: &ScenarioBank, patterns: &[FailurePattern], phi: F) -> Result<Vec<ScoredCandidate>>
where
    F: Fn(&ScenarioRecord, &FailurePattern) -> Result<f64> + Sync,
{
    if patterns.is_empty() {
        return Err(Error::EmptyPatternSet);
    }
    let records: Vec<&ScenarioRecord> = bank.scan().collect();
    records
        .par_iter()
        .map(|record| {
            let per_pattern = patterns
                .iter()
                .map(|p| {
                    Ok(PatternScore {
                        pattern_id: p.pattern_id.clone(),
                        phi: phi(record, p)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoredCandidate {
                scenario_id: record.scenario_id.clone(),
                relevance: mean_phi(&per_pattern),
                per_pattern,
            })
        })
        .collect()
}

/// Vector for a record's text, reusing the cached embedding when it matches.
fn record_vector(record: &ScenarioRecord, embedder: &Embedder) -> Result<Vec<f64>> {
    match record.cached_embedding(embedder) {
        Some(v) => Ok(v.to_vec()),
        None => embedder.embed(&record.text.text),
    }
}

fn pattern_vectors(patterns: &[FailurePattern], embedder: &Embedder) -> Result<BTreeMap<String, Vec<f64>>> {
    patterns
        .iter()
        .map(|p| Ok((p.pattern_id.clone(), embedder.embed(&p.description)?)))
        .collect()
}

/// Relevance of every bank record to the pattern set.
pub fn score_bank(
    bank: &ScenarioBank,
    patterns: &[FailurePattern],
    embedder: &Embedder,
) -> Result<Vec<ScoredCandidate>> {
    if patterns.is_empty() {
        return Err(Error::EmptyPatternSet);
    }
    let pattern_vecs = pattern_vectors(patterns, embedder)?;
    let records: Vec<&ScenarioRecord> = bank.scan().collect();
    let record_vecs: BTreeMap<&str, Vec<f64>> = records
        .par_iter()
        .map(|r| Ok((r.scenario_id.as_str(), record_vector(r, embedder)?)))
        .collect::<Result<_>>()?;
    score_with(bank, patterns, |record, pattern| {
        embedder.phi_with_vector(
            &record.text.text,
            &record_vecs[record.scenario_id.as_str()],
            &pattern.description,
            &pattern_vecs[&pattern.pattern_id],
        )
    })
}

fn by_relevance(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.relevance
        .total_cmp(&a.relevance)
        .then_with(|| a.scenario_id.cmp(&b.scenario_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub k: usize,
    pub members: Vec<ScoredCandidate>,
}

impl CandidateSet {
    /// Top-K of precomputed scores: descending relevance, ties by ascending id.
    pub fn top_k(mut scores: Vec<ScoredCandidate>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        scores.sort_by(by_relevance);
        scores.truncate(k);
        Ok(Self { k, members: scores })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.scenario_id.as_str()).collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.iter().any(|m| m.scenario_id == id)
    }
}

/// Because the subset objective is additive, the top-K by individual
/// relevance is exactly the best K-subset.
pub fn recommend(
    bank: &ScenarioBank,
    patterns: &[FailurePattern],
    k: usize,
    embedder: &Embedder,
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if patterns.is_empty() {
        return Err(Error::EmptyPatternSet);
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    CandidateSet::top_k(score_bank(bank, patterns, embedder)?, k)
}

/// Uniform K-subset of the bank, ordered by relevance like a recommendation.
pub fn random_selection(scores: Vec<ScoredCandidate>, k: usize, seed: u64) -> Result<CandidateSet> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<ScoredCandidate> = scores.choose_multiple(&mut rng, k.min(scores.len())).cloned().collect();
    CandidateSet::top_k(picked, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuggestionOp {
    Replace,
    Augment,
    Prioritize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectionSuggestion {
    pub op: SuggestionOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_scenario_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement_or_added_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_id: Option<String>,
    pub rationale: String,
}

impl ReflectionSuggestion {
    /// The scenario the suggestion is keyed on: the added id for augment, the
    /// target otherwise.
    pub fn key(&self) -> Option<&str> {
        match self.op {
            SuggestionOp::Augment => self.replacement_or_added_id.as_deref(),
            _ => self.target_scenario_id.as_deref(),
        }
    }

    fn replace(target: &str, with: &str, rationale: String) -> Self {
        Self {
            op: SuggestionOp::Replace,
            target_scenario_id: Some(target.into()),
            replacement_or_added_id: Some(with.into()),
            pattern_id: None,
            rationale,
        }
    }

    fn augment(added: &str, pattern: &str, rationale: String) -> Self {
        Self {
            op: SuggestionOp::Augment,
            target_scenario_id: None,
            replacement_or_added_id: Some(added.into()),
            pattern_id: Some(pattern.into()),
            rationale,
        }
    }

    fn prioritize(target: &str, pattern: &str, rationale: String) -> Self {
        Self {
            op: SuggestionOp::Prioritize,
            target_scenario_id: Some(target.into()),
            replacement_or_added_id: None,
            pattern_id: Some(pattern.into()),
            rationale,
        }
    }
}

fn sort_suggestions(suggestions: &mut [ReflectionSuggestion]) {
    suggestions.sort_by(|a, b| (a.op, a.key()).cmp(&(b.op, b.key())));
}

/// Checks that a suggestion list is well-formed against the candidates and bank.
pub fn validate_suggestions(
    suggestions: &[ReflectionSuggestion],
    candidates: &CandidateSet,
    bank: &ScenarioBank,
) -> Result<()> {
    let bad = |msg: String| Err(Error::MalformedLlmOutput(msg));
    let mut keys = BTreeSet::new();
    for s in suggestions {
        let (needs_target, needs_other) = match s.op {
            SuggestionOp::Replace => (true, true),
            SuggestionOp::Augment => (false, true),
            SuggestionOp::Prioritize => (true, false),
        };
        if needs_target != s.target_scenario_id.is_some() || needs_other != s.replacement_or_added_id.is_some() {
            return bad(format!("{:?} suggestion has the wrong id fields", s.op));
        }
        if let Some(t) = &s.target_scenario_id {
            if !candidates.contains(t) {
                return bad(format!("{:?} target {t} is not a candidate", s.op));
            }
        }
        if let Some(id) = &s.replacement_or_added_id {
            if !bank.contains(id) {
                return bad(format!("{:?} references {id}, which is not in the bank", s.op));
            }
        }
        if !keys.insert((s.op, s.key().map(str::to_string))) {
            return bad(format!("more than one {:?} suggestion for {:?}", s.op, s.key()));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ReflectPayload<'a> {
    k: usize,
    candidates: Vec<CandidateDigest<'a>>,
    patterns: Vec<PatternDigest<'a>>,
}

#[derive(Serialize)]
struct CandidateDigest<'a> {
    scenario_id: &'a str,
    relevance: f64,
    text: &'a str,
}

#[derive(Serialize)]
struct PatternDigest<'a> {
    pattern_id: &'a str,
    description: &'a str,
    severity: u8,
}

#[derive(Deserialize)]
struct ReflectResponse {
    suggestions: Vec<ReflectionSuggestion>,
}

/// Asks the LLM to audit the candidate set.
pub fn reflect_llm(
    candidates: &CandidateSet,
    patterns: &[FailurePattern],
    bank: &ScenarioBank,
    llm: &LlmClient,
) -> Result<Vec<ReflectionSuggestion>> {
    if patterns.is_empty() {
        return Err(Error::EmptyPatternSet);
    }
    if candidates.members.is_empty() {
        return Err(Error::EmptyBank);
    }
    let payload = ReflectPayload {
        k: candidates.k,
        candidates: candidates
            .members
            .iter()
            .map(|m| {
                Ok(CandidateDigest {
                    scenario_id: &m.scenario_id,
                    relevance: m.relevance,
                    text: &bank.get(&m.scenario_id)?.text.text,
                })
            })
            .collect::<Result<_>>()?,
        patterns: patterns
            .iter()
            .map(|p| PatternDigest {
                pattern_id: &p.pattern_id,
                description: &p.description,
                severity: p.severity,
            })
            .collect(),
    };
    let task = LlmTask::new(TaskKind::Reflect, &payload);
    let response: ReflectResponse =
        serde_json::from_value(llm.complete(&task)?).map_err(|e| Error::MalformedLlmOutput(e.to_string()))?;
    let mut suggestions = response.suggestions;
    validate_suggestions(&suggestions, candidates, bank)?;
    sort_suggestions(&mut suggestions);
    Ok(suggestions)
}

/// Thresholds for rule-based reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectThresholds {
    pub tau_cov: f64,
    pub tau_dup: f64,
}

impl Default for ReflectThresholds {
    fn default() -> Self {
        Self {
            tau_cov: DEFAULT_TAU_COV,
            tau_dup: DEFAULT_TAU_DUP,
        }
    }
}

struct ScoreTable {
    scores: Vec<ScoredCandidate>,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl ScoreTable {
    fn build(bank: &ScenarioBank, patterns: &[FailurePattern], embedder: &Embedder) -> Result<Self> {
        let scores = score_bank(bank, patterns, embedder)?;
        let vectors = bank
            .scan()
            .map(|r| Ok((r.scenario_id.clone(), record_vector(r, embedder)?)))
            .collect::<Result<_>>()?;
        Ok(Self { scores, vectors })
    }

    fn phi_pattern(&self, idx: usize, pattern_idx: usize) -> f64 {
        self.scores[idx].per_pattern[pattern_idx].phi
    }

    fn index(&self) -> BTreeMap<&str, usize> {
        self.scores
            .iter()
            .enumerate()
            .map(|(i, s)| (s.scenario_id.as_str(), i))
            .collect()
    }
}

/// Deterministic reflection.
///
/// * augment: every pattern whose best candidate similarity is below
///   `tau_cov` gets the best-scoring bank scenario for it that is not
///   already selected and not a near-duplicate of a selected one;
/// * replace: for each candidate pair at or above `tau_dup`, the member with
///   lower relevance (higher id on ties) is swapped for the most relevant
///   non-member that is not a near-duplicate of the selection;
/// * prioritize: candidates reaching `tau_cov` on a severity-3 pattern that are
///   not being replaced.
///
/// Output is sorted by (op, key).
pub fn reflect_rules(
    candidates: &CandidateSet,
    patterns: &[FailurePattern],
    bank: &ScenarioBank,
    embedder: &Embedder,
    thresholds: ReflectThresholds,
) -> Result<Vec<ReflectionSuggestion>> {
    if patterns.is_empty() || candidates.members.is_empty() {
        return Ok(Vec::new());
    }
    let table = ScoreTable::build(bank, patterns, embedder)?;
    let index = table.index();
    let dup_phi = |a: &str, b: &str| {
        let (ta, tb) = (&bank.get(a)?.text.text, &bank.get(b)?.text.text);
        embedder.phi_with_vector(ta, &table.vectors[a], tb, &table.vectors[b])
    };

    // Selection as it will look after the suggestions; used to keep new
    // scenarios from duplicating existing ones.
    let mut selected: Vec<String> = candidates.members.iter().map(|m| m.scenario_id.clone()).collect();
    let mut in_use: BTreeSet<String> = selected.iter().cloned().collect();
    let mut suggestions = Vec::new();

    let mut ranked: Vec<usize> = (0..table.scores.len()).collect();
    ranked.sort_by(|&a, &b| by_relevance_idx(&table, a, b));
    let fits = |id: &str, selected: &[String], in_use: &BTreeSet<String>| -> Result<bool> {
        if in_use.contains(id) {
            return Ok(false);
        }
        for other in selected {
            if dup_phi(id, other)? >= thresholds.tau_dup {
                return Ok(false);
            }
        }
        Ok(true)
    };

    // Replace near-duplicates.
    let mut replaced = BTreeSet::new();
    for i in 0..candidates.members.len() {
        for j in i + 1..candidates.members.len() {
            let (a, b) = (&candidates.members[i], &candidates.members[j]);
            if replaced.contains(&a.scenario_id) || replaced.contains(&b.scenario_id) {
                continue;
            }
            let phi = dup_phi(&a.scenario_id, &b.scenario_id)?;
            if phi < thresholds.tau_dup {
                continue;
            }
            let loser = if by_relevance(a, b) == std::cmp::Ordering::Less {
                b
            } else {
                a
            };
            let keep: Vec<String> = selected.iter().filter(|s| **s != loser.scenario_id).cloned().collect();
            let mut replacement = None;
            for &idx in &ranked {
                let id = &table.scores[idx].scenario_id;
                if fits(id, &keep, &in_use)? {
                    replacement = Some(id.clone());
                    break;
                }
            }
            let Some(new_id) = replacement else { continue };
            replaced.insert(loser.scenario_id.clone());
            selected = keep;
            selected.push(new_id.clone());
            in_use.insert(new_id.clone());
            suggestions.push(ReflectionSuggestion::replace(
                &loser.scenario_id,
                &new_id,
                format!(
                    "{} and {} are near-duplicates (similarity {phi:.3}); {new_id} adds a distinct case",
                    a.scenario_id, b.scenario_id
                ),
            ));
        }
    }

    // Augment uncovered patterns.
    for (p_idx, pattern) in patterns.iter().enumerate() {
        let coverage = candidates
            .members
            .iter()
            .map(|m| table.phi_pattern(index[m.scenario_id.as_str()], p_idx))
            .fold(0.0, f64::max);
        if coverage >= thresholds.tau_cov {
            continue;
        }
        let mut ranked: Vec<usize> = (0..table.scores.len()).collect();
        ranked.sort_by(|&a, &b| {
            table
                .phi_pattern(b, p_idx)
                .total_cmp(&table.phi_pattern(a, p_idx))
                .then_with(|| table.scores[a].scenario_id.cmp(&table.scores[b].scenario_id))
        });
        for idx in ranked {
            let id = table.scores[idx].scenario_id.clone();
            if fits(&id, &selected, &in_use)? {
                let phi = table.phi_pattern(idx, p_idx);
                suggestions.push(ReflectionSuggestion::augment(
                    &id,
                    &pattern.pattern_id,
                    format!(
                        "pattern {} is covered at {coverage:.3} < {:.3}; {id} matches it at {phi:.3}",
                        pattern.pattern_id, thresholds.tau_cov
                    ),
                ));
                selected.push(id.clone());
                in_use.insert(id);
                break;
            }
        }
    }

    // Prioritize members matching severe patterns.
    for member in &candidates.members {
        if replaced.contains(&member.scenario_id) {
            continue;
        }
        let idx = index[member.scenario_id.as_str()];
        let hit = patterns
            .iter()
            .enumerate()
            .filter(|(_, p)| p.severity >= 3)
            .map(|(p_idx, p)| (table.phi_pattern(idx, p_idx), p))
            .filter(|(phi, _)| *phi >= thresholds.tau_cov)
            .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.pattern_id.cmp(&a.1.pattern_id)));
        if let Some((phi, p)) = hit {
            suggestions.push(ReflectionSuggestion::prioritize(
                &member.scenario_id,
                &p.pattern_id,
                format!("matches high-severity pattern {} at {phi:.3}", p.pattern_id),
            ));
        }
    }

    sort_suggestions(&mut suggestions);
    Ok(suggestions)
}

fn by_relevance_idx(table: &ScoreTable, a: usize, b: usize) -> std::cmp::Ordering {
    by_relevance(&table.scores[a], &table.scores[b])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedMember {
    pub scenario_id: String,
    pub relevance: f64,
    pub prioritized: bool,
    pub r_prime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub suggestion: ReflectionSuggestion,
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedSet {
    pub members: Vec<RefinedMember>,
    pub audit: Vec<AuditEntry>,
}

impl RefinedSet {
    pub fn ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.scenario_id.as_str()).collect()
    }

    /// The candidate set unchanged, with r' == r.
    pub fn identity(candidates: &CandidateSet) -> Self {
        let members = candidates
            .members
            .iter()
            .map(|m| RefinedMember {
                scenario_id: m.scenario_id.clone(),
                relevance: m.relevance,
                prioritized: false,
                r_prime: m.relevance,
            })
            .collect();
        Self {
            members,
            audit: Vec::new(),
        }
    }
}

/// `r' = r * (1 + beta * prioritized)`.
pub fn r_prime(relevance: f64, prioritized: bool) -> f64 {
    relevance * (1.0 + PRIORITY_BETA * f64::from(u8::from(prioritized)))
}

/// Applies suggestions in the order replace, augment, prioritize, holding the
/// set size at K. An augment evicts the lowest-relevance member that was
/// neither added by an augment nor is about to be prioritized; suggestions
/// that would not change the set are recorded as skipped.
pub fn refine(
    candidates: &CandidateSet,
    suggestions: &[ReflectionSuggestion],
    bank: &ScenarioBank,
    patterns: &[FailurePattern],
    embedder: &Embedder,
) -> Result<RefinedSet> {
    if suggestions.is_empty() {
        return Ok(RefinedSet::identity(candidates));
    }
    validate_suggestions(suggestions, candidates, bank)?;
    let replaced: BTreeSet<&str> = suggestions
        .iter()
        .filter(|s| s.op == SuggestionOp::Replace)
        .filter_map(|s| s.target_scenario_id.as_deref())
        .collect();
    if let Some(conflict) = suggestions
        .iter()
        .filter(|s| s.op == SuggestionOp::Prioritize)
        .filter_map(|s| s.target_scenario_id.as_deref())
        .find(|t| replaced.contains(t))
    {
        return Err(Error::ConflictingSuggestions(format!(
            "{conflict} is both replaced and prioritized"
        )));
    }

    let relevance_of = |id: &str| -> Result<f64> {
        if let Some(m) = candidates.members.iter().find(|m| m.scenario_id == id) {
            return Ok(m.relevance);
        }
        let record = bank.get(id)?;
        let v = record_vector(record, embedder)?;
        let mut per_pattern = Vec::with_capacity(patterns.len());
        for p in patterns {
            let pv = embedder.embed(&p.description)?;
            per_pattern.push(PatternScore {
                pattern_id: p.pattern_id.clone(),
                phi: embedder.phi_with_vector(&record.text.text, &v, &p.description, &pv)?,
            });
        }
        if per_pattern.is_empty() {
            return Err(Error::EmptyPatternSet);
        }
        Ok(mean_phi(&per_pattern))
    };

    let pending_priority: BTreeSet<&str> = suggestions
        .iter()
        .filter(|s| s.op == SuggestionOp::Prioritize)
        .filter_map(|s| s.target_scenario_id.as_deref())
        .collect();
    let mut members: Vec<(String, f64)> = candidates
        .members
        .iter()
        .map(|m| (m.scenario_id.clone(), m.relevance))
        .collect();
    let mut augmented: BTreeSet<String> = BTreeSet::new();
    let mut audit = Vec::new();
    let has = |members: &[(String, f64)], id: &str| members.iter().any(|(m, _)| m == id);

    for op in [SuggestionOp::Replace, SuggestionOp::Augment, SuggestionOp::Prioritize] {
        for s in suggestions.iter().filter(|s| s.op == op) {
            let mut entry = AuditEntry {
                suggestion: s.clone(),
                applied: false,
                evicted: None,
                note: None,
            };
            match op {
                SuggestionOp::Replace => {
                    let target = s.target_scenario_id.as_deref().unwrap_or_default();
                    let with = s.replacement_or_added_id.as_deref().unwrap_or_default();
                    if has(&members, with) {
                        entry.note = Some(format!("{with} is already selected"));
                    } else if let Some(slot) = members.iter_mut().find(|(m, _)| m == target) {
                        *slot = (with.to_string(), relevance_of(with)?);
                        entry.applied = true;
                    } else {
                        entry.note = Some(format!("{target} is no longer selected"));
                    }
                }
                SuggestionOp::Augment => {
                    let added = s.replacement_or_added_id.as_deref().unwrap_or_default();
                    if has(&members, added) {
                        entry.note = Some(format!("{added} is already selected"));
                    } else {
                        let r = relevance_of(added)?;
                        if members.len() >= candidates.k {
                            let victim = members
                                .iter()
                                .enumerate()
                                .filter(|(_, (id, _))| {
                                    !augmented.contains(id) && !pending_priority.contains(id.as_str())
                                })
                                .min_by(|(_, a), (_, b)| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                                .map(|(i, _)| i);
                            match victim {
                                Some(i) => entry.evicted = Some(members.remove(i).0),
                                None => {
                                    entry.note = Some("every member is protected".into());
                                    audit.push(entry);
                                    continue;
                                }
                            }
                        }
                        members.push((added.to_string(), r));
                        augmented.insert(added.to_string());
                        entry.applied = true;
                    }
                }
                SuggestionOp::Prioritize => {
                    let target = s.target_scenario_id.as_deref().unwrap_or_default();
                    entry.applied = has(&members, target);
                    if !entry.applied {
                        entry.note = Some(format!("{target} is no longer selected"));
                    }
                }
            }
            audit.push(entry);
        }
    }

    let prioritized: BTreeSet<&str> = audit
        .iter()
        .filter(|e| e.applied && e.suggestion.op == SuggestionOp::Prioritize)
        .filter_map(|e| e.suggestion.target_scenario_id.as_deref())
        .collect();
    let mut refined: Vec<RefinedMember> = members
        .into_iter()
        .map(|(id, relevance)| {
            let p = prioritized.contains(id.as_str());
            RefinedMember {
                r_prime: r_prime(relevance, p),
                relevance,
                prioritized: p,
                scenario_id: id,
            }
        })
        .collect();
    refined.sort_by(|a, b| {
        b.r_prime
            .total_cmp(&a.r_prime)
            .then_with(|| a.scenario_id.cmp(&b.scenario_id))
    });
    Ok(RefinedSet {
        members: refined,
        audit,
    })
}

pub fn load_suggestions(path: &std::path::Path) -> Result<Vec<ReflectionSuggestion>> {
    crate::harness::read_jsonl(path, |_, _: &ReflectionSuggestion| Ok(()))
}

pub fn save_suggestions(path: &std::path::Path, suggestions: &[ReflectionSuggestion]) -> Result<()> {
    crate::harness::write_jsonl(path, suggestions)
}

/// Reads a candidate set written one member per line; K is the member count.
pub fn load_candidates(path: &std::path::Path) -> Result<CandidateSet> {
    let members = crate::harness::read_jsonl(path, |_, _: &ScoredCandidate| Ok(()))?;
    Ok(CandidateSet {
        k: members.len(),
        members,
    })
}

pub fn save_candidates(path: &std::path::Path, candidates: &CandidateSet) -> Result<()> {
    crate::harness::write_jsonl(path, &candidates.members)
}

#[cfg(test)]
mod tests;
