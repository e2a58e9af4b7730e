use serde_json::{json, Value};

use super::TaskKind;

pub(crate) fn schema_for(kind: TaskKind) -> Value {
    match kind {
        TaskKind::Analyze => json!({
            "type": "object",
            "required": ["patterns"],
            "properties": {
                "patterns": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["pattern_id", "category", "description", "evidence", "severity"],
                        "properties": {
                            "pattern_id": {"type": "string", "minLength": 1},
                            "category": {"enum": ["collision", "traffic_signal_violation", "route_deviation", "speeding"]},
                            "context": {
                                "type": "object",
                                "additionalProperties": false,
                                "properties": {
                                    "weather": {"enum": ["clear", "rain", "fog", "snow"]},
                                    "time": {"enum": ["day", "night", "dawn", "dusk"]},
                                    "location": {"enum": ["urban_intersection", "highway", "roundabout", "merge_ramp", "residential"]}
                                }
                            },
                            "description": {"type": "string", "minLength": 1},
                            "evidence": {
                                "type": "array",
                                "minItems": 1,
                                "items": {
                                    "type": "object",
                                    "required": ["route_id", "event_index"],
                                    "properties": {
                                        "route_id": {"type": "string"},
                                        "event_index": {"type": "integer", "minimum": 0}
                                    }
                                }
                            },
                            "severity": {"type": "integer", "minimum": 1, "maximum": 3}
                        }
                    }
                }
            }
        }),
        TaskKind::Reflect | TaskKind::Refine => json!({
            "type": "object",
            "required": ["suggestions"],
            "properties": {
                "suggestions": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["op", "rationale"],
                        "properties": {
                            "op": {"enum": ["replace", "augment", "prioritize"]},
                            "target_scenario_id": {"type": "string"},
                            "replacement_or_added_id": {"type": "string"},
                            "pattern_id": {"type": "string"},
                            "rationale": {"type": "string"}
                        }
                    }
                }
            }
        }),
        TaskKind::Paraphrase => json!({
            "type": "object",
            "required": ["text"],
            "properties": {"text": {"type": "string", "minLength": 1}}
        }),
        TaskKind::JudgeSimilarity => json!({
            "type": "object",
            "required": ["score"],
            "properties": {"score": {"type": "number", "minimum": 0, "maximum": 100}}
        }),
    }
}

/// Validates `instance` against the schema of `kind`, returning every violation.
pub(crate) fn validate(kind: TaskKind, instance: &Value) -> Result<(), String> {
    let schema = schema_for(kind);
    let validator = jsonschema::validator_for(&schema).expect("built-in schemas compile");
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| {
            let path = e.instance_path.to_string();
            if path.is_empty() {
                e.to_string()
            } else {
                format!("{path}: {e}")
            }
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join("; "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_required_key_is_named() {
        let err = validate(TaskKind::Paraphrase, &json!({"txt": "x"})).unwrap_err();
        assert!(err.contains("text"), "{err}");
    }

    #[test]
    fn enum_and_type_violations_are_reported() {
        let bad = json!({"patterns": [{
            "pattern_id": "p1", "category": "explosion", "description": "d",
            "evidence": [{"route_id": "r", "event_index": -1}], "severity": 4
        }]});
        let err = validate(TaskKind::Analyze, &bad).unwrap_err();
        assert!(err.contains("/patterns/0/category"), "{err}");
        assert!(err.contains("/patterns/0/severity"), "{err}");
        assert!(err.contains("event_index"), "{err}");
    }

    #[test]
    fn valid_documents_pass() {
        assert!(validate(TaskKind::JudgeSimilarity, &json!({"score": 42})).is_ok());
        assert!(validate(TaskKind::Reflect, &json!({"suggestions": []})).is_ok());
    }
}
