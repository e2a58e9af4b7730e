use std::sync::atomic::Ordering;

use proptest::prelude::*;

use super::*;
use crate::analysis::{EvidenceRef, FailureCategory, PatternContext};
use crate::bank::ScenarioDraft;
use crate::llm::tests::{config, ScriptedTransport};
use crate::llm::LlmMode;
use crate::scenario::tests::arb_attributes;
use crate::scenario::{Location, Provenance, ScenarioAttributes, ScenarioText, TimeOfDay, Weather};

fn attrs(w: Weather, t: TimeOfDay, l: Location, tags: &[&str]) -> ScenarioAttributes {
    ScenarioAttributes::new(w, t, l, tags.iter().copied()).unwrap()
}

fn pattern(id: &str, description: &str, severity: u8) -> FailurePattern {
    FailurePattern {
        pattern_id: id.into(),
        category: FailureCategory::Collision,
        context: PatternContext::default(),
        description: description.into(),
        evidence: vec![EvidenceRef {
            route_id: "r".into(),
            event_index: 0,
        }],
        severity,
    }
}

/// s0001 fog/night/urban + stopped lead, s0002 clear/day/highway,
/// s0003 rain/dusk/merge + cut-in, s0004 clear/night/urban + red light,
/// s0005 snow/dawn/residential + pedestrian and school zone.
fn five_bank() -> ScenarioBank {
    let mut bank = ScenarioBank::new();
    bank.ingest([
        attrs(
            Weather::Fog,
            TimeOfDay::Night,
            Location::UrbanIntersection,
            &["stopped_lead_vehicle"],
        ),
        attrs(Weather::Clear, TimeOfDay::Day, Location::Highway, &[]),
        attrs(
            Weather::Rain,
            TimeOfDay::Dusk,
            Location::MergeRamp,
            &["aggressive_cut_in"],
        ),
        attrs(
            Weather::Clear,
            TimeOfDay::Night,
            Location::UrbanIntersection,
            &["red_light"],
        ),
        attrs(
            Weather::Snow,
            TimeOfDay::Dawn,
            Location::Residential,
            &["occluded_pedestrian", "school_zone"],
        ),
    ])
    .unwrap();
    bank
}

fn two_patterns() -> Vec<FailurePattern> {
    vec![
        pattern(
            "fog_collision",
            "collision with stopped lead vehicle in fog at night",
            3,
        ),
        pattern(
            "night_red_light",
            "ran a red light at a traffic light in clear at night",
            2,
        ),
    ]
}

// Hashed-TF cosines computed by an independent Python implementation
// (xxhash64, 512 buckets, log weights).
const ORACLE: [(&str, f64, f64, f64); 5] = [
    ("s0001", 0.44334492074990983, 0.15724981744209282, 0.30029736909600135),
    ("s0002", 0.07772700607406077, 0.07022947327010345, 0.07397823967208211),
    ("s0003", 0.18767523900385896, 0.20263656347947995, 0.19515590124166945),
    ("s0004", 0.20676277660672898, 0.3842186638967336, 0.2954907202517313),
    ("s0005", 0.12977108542372803, 0.09292111330242878, 0.1113460993630784),
];

#[test]
fn fixture_scores_match_independent_values() {
    let scores = score_bank(&five_bank(), &two_patterns(), &Embedder::default()).unwrap();
    assert_eq!(scores.len(), 5);
    for (s, (id, p0, p1, r)) in scores.iter().zip(ORACLE) {
        assert_eq!(s.scenario_id, id);
        assert!((s.per_pattern[0].phi - p0).abs() < 1e-12, "{id}");
        assert!((s.per_pattern[1].phi - p1).abs() < 1e-12, "{id}");
        assert!((s.relevance - r).abs() < 1e-12, "{id}");
    }
}

#[test]
fn cached_embeddings_do_not_change_scores() {
    let embedder = Embedder::default();
    let mut bank = five_bank();
    let cold = score_bank(&bank, &two_patterns(), &embedder).unwrap();
    bank.refresh_embeddings(&embedder).unwrap();
    assert_eq!(score_bank(&bank, &two_patterns(), &embedder).unwrap(), cold);
}

#[test]
fn singleton_and_duplicated_patterns() {
    let embedder = Embedder::default();
    let bank = five_bank();
    let p = two_patterns();
    let single = score_bank(&bank, &p[..1], &embedder).unwrap();
    for s in &single {
        let record = bank.get(&s.scenario_id).unwrap();
        assert_eq!(s.relevance, embedder.phi(&record.text.text, &p[0].description).unwrap());
    }
    let doubled = score_bank(&bank, &[p[0].clone(), p[0].clone()], &embedder).unwrap();
    for (a, b) in single.iter().zip(&doubled) {
        assert_eq!(a.relevance, b.relevance);
    }
}

#[test]
fn empty_inputs_are_errors() {
    let e = Embedder::default();
    assert!(matches!(score_bank(&five_bank(), &[], &e), Err(Error::EmptyPatternSet)));
    assert!(matches!(
        recommend(&five_bank(), &[], 3, &e),
        Err(Error::EmptyPatternSet)
    ));
    assert!(matches!(
        recommend(&ScenarioBank::new(), &two_patterns(), 3, &e),
        Err(Error::EmptyBank)
    ));
    assert!(matches!(
        recommend(&five_bank(), &two_patterns(), 0, &e),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn large_k_returns_whole_bank_sorted() {
    let set = recommend(&five_bank(), &two_patterns(), 10, &Embedder::default()).unwrap();
    assert_eq!(set.ids(), ["s0001", "s0004", "s0003", "s0005", "s0002"]);
}

#[test]
fn equal_scores_break_ties_by_id() {
    let scores = score_with(&five_bank(), &two_patterns(), |_, _| Ok(0.5)).unwrap();
    let set = CandidateSet::top_k(scores, 3).unwrap();
    assert_eq!(set.ids(), ["s0001", "s0002", "s0003"]);
}

#[test]
fn uncovered_fog_collision_is_augmented_with_the_fog_scenario() {
    // Coverage of the fog pattern by {s0003, s0004} is 0.207 < 0.25; s0001 is
    // the bank's only fog / stopped-lead scenario and scores 0.443 on it.
    let bank = five_bank();
    let patterns = two_patterns();
    let embedder = Embedder::default();
    let scores = score_bank(&bank, &patterns, &embedder).unwrap();
    let subset = scores
        .into_iter()
        .filter(|s| s.scenario_id == "s0003" || s.scenario_id == "s0004")
        .collect();
    let candidates = CandidateSet::top_k(subset, 2).unwrap();
    let suggestions = reflect_rules(&candidates, &patterns, &bank, &embedder, ReflectThresholds::default()).unwrap();
    assert_eq!(suggestions.len(), 1, "{suggestions:?}");
    assert_eq!(suggestions[0].op, SuggestionOp::Augment);
    assert_eq!(suggestions[0].replacement_or_added_id.as_deref(), Some("s0001"));
    assert_eq!(suggestions[0].pattern_id.as_deref(), Some("fog_collision"));

    let refined = refine(&candidates, &suggestions, &bank, &patterns, &embedder).unwrap();
    assert_eq!(refined.ids(), ["s0001", "s0004"]);
    assert_eq!(refined.audit[0].evicted.as_deref(), Some("s0003"));
    assert!((refined.members[0].r_prime - ORACLE[0].3).abs() < 1e-12);
}

#[test]
fn covered_patterns_without_duplicates_need_no_reflection() {
    let bank = five_bank();
    let patterns = vec![pattern("p", "the weather is clear", 1)];
    let embedder = Embedder::default();
    let candidates = recommend(&bank, &patterns, 3, &embedder).unwrap();
    let thresholds = ReflectThresholds {
        tau_cov: 0.1,
        tau_dup: 0.99,
    };
    assert!(reflect_rules(&candidates, &patterns, &bank, &embedder, thresholds)
        .unwrap()
        .is_empty());
}

#[test]
fn identical_texts_replace_the_higher_id() {
    let mut bank = five_bank();
    let same = ScenarioText {
        text: "Fog at night with a stopped lead vehicle ahead.".into(),
        provenance: Provenance::LlmParaphrase,
    };
    let drafts = [(Weather::Fog, TimeOfDay::Dusk), (Weather::Fog, TimeOfDay::Dawn)].map(|(w, t)| ScenarioDraft {
        scenario_id: None,
        attributes: attrs(w, t, Location::Highway, &["stopped_lead_vehicle"]),
        text: Some(same.clone()),
    });
    bank.ingest(drafts).unwrap();
    let patterns = vec![pattern("fog", "stopped lead vehicle in fog at night", 3)];
    let embedder = Embedder::default();
    let scores = score_bank(&bank, &patterns, &embedder).unwrap();
    let pair: Vec<_> = scores
        .into_iter()
        .filter(|s| s.scenario_id == "s0006" || s.scenario_id == "s0007")
        .collect();
    let candidates = CandidateSet::top_k(pair, 2).unwrap();
    let thresholds = ReflectThresholds {
        tau_cov: 0.99,
        tau_dup: 0.9,
    };
    let suggestions = reflect_rules(&candidates, &patterns, &bank, &embedder, thresholds).unwrap();
    let replaces: Vec<_> = suggestions.iter().filter(|s| s.op == SuggestionOp::Replace).collect();
    assert_eq!(replaces.len(), 1);
    assert_eq!(replaces[0].target_scenario_id.as_deref(), Some("s0007"));
    assert_eq!(replaces[0].replacement_or_added_id.as_deref(), Some("s0001"));
}

fn member(id: &str, r: f64) -> ScoredCandidate {
    ScoredCandidate {
        scenario_id: id.into(),
        relevance: r,
        per_pattern: vec![PatternScore {
            pattern_id: "p".into(),
            phi: r,
        }],
    }
}

fn prioritize(id: &str) -> ReflectionSuggestion {
    ReflectionSuggestion::prioritize(id, "p", String::new())
}

#[test]
fn refine_without_suggestions_is_identity() {
    let c = CandidateSet::top_k(vec![member("s0001", 0.4), member("s0002", 0.3)], 2).unwrap();
    let r = refine(&c, &[], &five_bank(), &two_patterns(), &Embedder::default()).unwrap();
    assert_eq!(r.ids(), c.ids());
    assert!(r.members.iter().zip(&c.members).all(|(a, b)| a.r_prime == b.relevance));
}

#[test]
fn refine_replace_keeps_size() {
    let bank = five_bank();
    let c = CandidateSet::top_k(vec![member("s0001", 0.4), member("s0002", 0.3)], 2).unwrap();
    let s = [ReflectionSuggestion::replace("s0002", "s0005", String::new())];
    let r = refine(&c, &s, &bank, &two_patterns(), &Embedder::default()).unwrap();
    assert_eq!(r.members.len(), 2);
    assert_eq!(r.ids(), ["s0001", "s0005"]);
    assert!((r.members[1].relevance - ORACLE[4].3).abs() < 1e-12);
}

#[test]
fn prioritized_half_beats_unprioritized_point_five_five() {
    let c = CandidateSet::top_k(vec![member("s0001", 0.55), member("s0002", 0.5)], 2).unwrap();
    let r = refine(
        &c,
        &[prioritize("s0002")],
        &five_bank(),
        &two_patterns(),
        &Embedder::default(),
    )
    .unwrap();
    assert_eq!(r.ids(), ["s0002", "s0001"]);
    assert!((r.members[0].r_prime - 0.6).abs() < 1e-12);
    assert!(r.members[0].prioritized);
}

#[test]
fn replace_and_prioritize_same_target_conflict() {
    let c = CandidateSet::top_k(vec![member("s0001", 0.55), member("s0002", 0.5)], 2).unwrap();
    let s = [
        ReflectionSuggestion::replace("s0002", "s0003", String::new()),
        prioritize("s0002"),
    ];
    let err = refine(&c, &s, &five_bank(), &two_patterns(), &Embedder::default()).unwrap_err();
    assert!(matches!(err, Error::ConflictingSuggestions(_)));
}

#[test]
fn augment_spares_prioritized_members() {
    let c = CandidateSet::top_k(vec![member("s0001", 0.55), member("s0002", 0.5)], 2).unwrap();
    let s = [
        ReflectionSuggestion::augment("s0004", "p", String::new()),
        prioritize("s0002"),
    ];
    let r = refine(&c, &s, &five_bank(), &two_patterns(), &Embedder::default()).unwrap();
    assert_eq!(r.audit[0].evicted.as_deref(), Some("s0001"));
    assert_eq!(r.ids(), ["s0002", "s0004"]);
}

#[test]
fn invalid_references_are_rejected() {
    let c = CandidateSet::top_k(vec![member("s0001", 0.55)], 1).unwrap();
    let bank = five_bank();
    for bad in [
        ReflectionSuggestion::replace("s0001", "s0099", String::new()),
        ReflectionSuggestion::replace("s0003", "s0002", String::new()),
        prioritize("s0004"),
    ] {
        assert!(matches!(
            validate_suggestions(&[bad], &c, &bank),
            Err(Error::MalformedLlmOutput(_))
        ));
    }
    let twice = [prioritize("s0001"), prioritize("s0001")];
    assert!(validate_suggestions(&twice, &c, &bank).is_err());
}

#[test]
fn random_selection_is_seeded() {
    let scores = score_bank(&five_bank(), &two_patterns(), &Embedder::default()).unwrap();
    let a = random_selection(scores.clone(), 3, 7).unwrap();
    assert_eq!(a, random_selection(scores.clone(), 3, 7).unwrap());
    assert_eq!(a.members.len(), 3);
    let mut ids = a.ids();
    ids.dedup();
    assert_eq!(ids.len(), 3);
}

fn fenced(v: serde_json::Value) -> String {
    format!("```json\n{v}\n```")
}

#[test]
fn llm_reflection_replays_and_validates() {
    let bank = five_bank();
    let patterns = two_patterns();
    let candidates = recommend(&bank, &patterns, 2, &Embedder::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let reply = serde_json::json!({"suggestions": [
        {"op": "replace", "target_scenario_id": "s0004", "replacement_or_added_id": "s0003", "rationale": "more variety"},
        {"op": "prioritize", "target_scenario_id": "s0001", "rationale": "collision risk"}
    ]});
    let recorder = LlmClient::with_transport(
        config(LlmMode::Record, dir.path()),
        ScriptedTransport::new([fenced(reply)]),
    );
    let recorded = reflect_llm(&candidates, &patterns, &bank, &recorder).unwrap();
    assert_eq!(recorded.len(), 2);
    assert_eq!(recorded[0].op, SuggestionOp::Replace);

    let offline = ScriptedTransport::new(Vec::<String>::new());
    let replayer = LlmClient::with_transport(config(LlmMode::Replay, dir.path()), offline.clone());
    assert_eq!(reflect_llm(&candidates, &patterns, &bank, &replayer).unwrap(), recorded);
    assert_eq!(offline.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn llm_reflection_rejects_unknown_ids_and_accepts_empty() {
    let bank = five_bank();
    let patterns = two_patterns();
    let candidates = recommend(&bank, &patterns, 2, &Embedder::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let unknown = serde_json::json!({"suggestions": [
        {"op": "augment", "replacement_or_added_id": "s0404", "pattern_id": "fog_collision", "rationale": "x"}
    ]});
    let client = LlmClient::with_transport(
        config(LlmMode::Live, dir.path()),
        ScriptedTransport::new([fenced(unknown)]),
    );
    assert!(matches!(
        reflect_llm(&candidates, &patterns, &bank, &client),
        Err(Error::MalformedLlmOutput(_))
    ));

    let empty = serde_json::json!({"suggestions": []});
    let client = LlmClient::with_transport(
        config(LlmMode::Live, dir.path()),
        ScriptedTransport::new([fenced(empty)]),
    );
    assert!(reflect_llm(&candidates, &patterns, &bank, &client).unwrap().is_empty());
}

/// Best K-subset by exhaustive enumeration; ties go to the lexicographically
/// smallest sorted id list.
fn brute_force(scores: &[ScoredCandidate], k: usize) -> Vec<String> {
    let n = scores.len();
    let k = k.min(n);
    let mut best: Option<(f64, Vec<String>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let chosen: Vec<&ScoredCandidate> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| &scores[i]).collect();
        let mut values: Vec<f64> = chosen.iter().map(|c| c.relevance).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = values.iter().sum();
        let mut ids: Vec<String> = chosen.iter().map(|c| c.scenario_id.clone()).collect();
        ids.sort();
        let better = match &best {
            None => true,
            Some((bt, bids)) => total > *bt || (total == *bt && ids < *bids),
        };
        if better {
            best = Some((total, ids));
        }
    }
    let mut ids = best.map(|b| b.1).unwrap_or_default();
    let rel: BTreeMap<&str, f64> = scores.iter().map(|s| (s.scenario_id.as_str(), s.relevance)).collect();
    ids.sort_by(|a, b| rel[b.as_str()].total_cmp(&rel[a.as_str()]).then_with(|| a.cmp(b)));
    ids
}

fn arb_bank(max: usize) -> impl Strategy<Value = ScenarioBank> {
    prop::collection::vec(arb_attributes(), 1..=max).prop_map(|attrs| {
        let mut bank = ScenarioBank::new();
        bank.ingest(attrs).unwrap();
        bank
    })
}

fn arb_patterns() -> impl Strategy<Value = Vec<FailurePattern>> {
    let words = prop::sample::select(vec![
        "collision",
        "fog",
        "night",
        "red",
        "light",
        "pedestrian",
        "stopped",
        "lead",
        "vehicle",
        "highway",
        "rain",
        "merge",
        "school",
        "zone",
        "dusk",
        "snow",
        "intersection",
    ]);
    prop::collection::vec((prop::collection::vec(words, 2..6), 1u8..=3), 1..4).prop_map(|ps| {
        ps.into_iter()
            .enumerate()
            .map(|(i, (w, sev))| pattern(&format!("p{i}"), &w.join(" "), sev))
            .collect()
    })
}

/// Relevances drawn from a coarse grid so that ties are common.
fn arb_grid_scores() -> impl Strategy<Value = Vec<ScoredCandidate>> {
    prop::collection::vec(0u8..5, 1..=12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, q)| member(&format!("s{:04}", i + 1), f64::from(q) / 4.0))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn top_k_equals_exhaustive_subset(bank in arb_bank(12), patterns in arb_patterns(), k in 1usize..=4) {
        let embedder = Embedder::default();
        let scores = score_bank(&bank, &patterns, &embedder).unwrap();
        let got = recommend(&bank, &patterns, k, &embedder).unwrap();
        let ids: Vec<String> = got.ids().into_iter().map(String::from).collect();
        prop_assert_eq!(ids, brute_force(&scores, k));
    }

    #[test]
    fn top_k_equals_exhaustive_subset_with_ties(scores in arb_grid_scores(), k in 1usize..=4) {
        let got = CandidateSet::top_k(scores.clone(), k).unwrap();
        let ids: Vec<String> = got.ids().into_iter().map(String::from).collect();
        prop_assert_eq!(ids, brute_force(&scores, k));
    }

    #[test]
    fn relevance_is_mean_and_permutation_invariant(bank in arb_bank(8), patterns in arb_patterns(), c in 0.1f64..10.0) {
        let embedder = Embedder::default();
        let scores = score_bank(&bank, &patterns, &embedder).unwrap();
        for s in &scores {
            let mean = s.per_pattern.iter().map(|p| p.phi).sum::<f64>() / s.per_pattern.len() as f64;
            prop_assert!((s.relevance - mean).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&s.relevance));
        }
        let mut reversed = patterns.clone();
        reversed.reverse();
        let rev = score_bank(&bank, &reversed, &embedder).unwrap();
        for (a, b) in scores.iter().zip(&rev) {
            prop_assert_eq!(a.relevance, b.relevance);
        }

        let k = (bank.len() / 2).max(1);
        let base = CandidateSet::top_k(scores, k).unwrap();
        let scaled = score_with(&bank, &patterns, |r, p| Ok(c * embedder.phi(&r.text.text, &p.description)?)).unwrap();
        let scaled = CandidateSet::top_k(scaled, k).unwrap();
        prop_assert_eq!(base.ids(), scaled.ids());
    }

    #[test]
    fn refinement_preserves_size_and_uniqueness(
        bank in arb_bank(14),
        patterns in arb_patterns(),
        k in 1usize..=6,
        ops in prop::collection::vec((0usize..3, 0usize..16, 0usize..16), 0..8),
    ) {
        let embedder = Embedder::default();
        prop_assume!(bank.len() >= k);
        let candidates = recommend(&bank, &patterns, k, &embedder).unwrap();
        let ids: Vec<String> = bank.scan().map(|r| r.scenario_id.clone()).collect();
        let mut suggestions: Vec<ReflectionSuggestion> = Vec::new();
        let mut keys = BTreeSet::new();
        let mut replaced = BTreeSet::new();
        let mut prioritized = BTreeSet::new();
        for (op, a, b) in ops {
            let target = candidates.members[a % k].scenario_id.clone();
            let other = ids[b % ids.len()].clone();
            let s = match op {
                0 if !candidates.contains(&other) && !prioritized.contains(&target) => {
                    ReflectionSuggestion::replace(&target, &other, String::new())
                }
                1 => ReflectionSuggestion::augment(&other, "p0", String::new()),
                2 if !replaced.contains(&target) => prioritize(&target),
                _ => continue,
            };
            if !keys.insert((s.op, s.key().map(String::from))) {
                continue;
            }
            match s.op {
                SuggestionOp::Replace => replaced.insert(target),
                SuggestionOp::Prioritize => prioritized.insert(target),
                SuggestionOp::Augment => true,
            };
            suggestions.push(s);
        }
        let refined = refine(&candidates, &suggestions, &bank, &patterns, &embedder).unwrap();
        prop_assert_eq!(refined.members.len(), k);
        let mut seen: Vec<&str> = refined.ids();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), k);
        for w in refined.members.windows(2) {
            prop_assert!(w[0].r_prime > w[1].r_prime || (w[0].r_prime == w[1].r_prime && w[0].scenario_id < w[1].scenario_id));
        }
    }

    #[test]
    fn rule_reflection_does_not_revisit_resolved_duplicates(
        bank in arb_bank(14),
        patterns in arb_patterns(),
        k in 2usize..=6,
        tau_dup in 0.6f64..0.95,
    ) {
        let embedder = Embedder::default();
        prop_assume!(bank.len() >= k);
        let thresholds = ReflectThresholds { tau_cov: 0.25, tau_dup };
        let candidates = recommend(&bank, &patterns, k, &embedder).unwrap();
        let first = reflect_rules(&candidates, &patterns, &bank, &embedder, thresholds).unwrap();
        let refined = refine(&candidates, &first, &bank, &patterns, &embedder).unwrap();
        let scores = score_bank(&bank, &patterns, &embedder).unwrap();
        let again: Vec<ScoredCandidate> = refined
            .ids()
            .iter()
            .map(|id| scores.iter().find(|s| s.scenario_id == *id).unwrap().clone())
            .collect();
        let second = reflect_rules(&CandidateSet::top_k(again, k).unwrap(), &patterns, &bank, &embedder, thresholds).unwrap();
        let resolved: BTreeSet<&str> = first
            .iter()
            .filter(|s| s.op == SuggestionOp::Replace)
            .filter_map(|s| s.target_scenario_id.as_deref())
            .collect();
        for s in second.iter().filter(|s| s.op == SuggestionOp::Replace) {
            prop_assert!(!resolved.contains(s.target_scenario_id.as_deref().unwrap()));
        }
        let new_members: Vec<&str> = first.iter().filter(|s| s.op != SuggestionOp::Prioritize).filter_map(|s| s.replacement_or_added_id.as_deref()).collect();
        for s in second.iter().filter(|s| s.op == SuggestionOp::Replace) {
            prop_assert!(!new_members.contains(&s.target_scenario_id.as_deref().unwrap()), "a scenario added to resolve a gap is itself a duplicate");
        }
    }
}
