//! Text embeddings and the semantic similarity used for relevance scoring.
//!
//! The default backend hashes log-weighted term counts into a fixed number of
//! buckets. It needs no corpus statistics, so a scenario's vector never changes
//! as the bank grows.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{Error, Result};
use crate::llm::{LlmClient, LlmTask, TaskKind};

pub const DEFAULT_DIM: usize = 512;
pub const DEFAULT_HASH_SEED: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedBackend {
    HashedTfidf,
    Remote,
    /// Similarity judged by the LLM on a 0-100 scale; vectors still come from
    /// the hashed backend.
    LlmJudge,
}

/// Lowercases, splits on non-alphanumerics, and drops tokens shorter than two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_string)
        .collect()
}

/// Bucket index of a token under the given seed.
pub fn bucket(token: &str, seed: u64, dim: usize) -> usize {
    (XxHash64::oneshot(seed, token.as_bytes()) % dim as u64) as usize
}

/// Dot product of two unit vectors, clamped to `[0, 1]`.
pub fn cosine_unit(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.clamp(0.0, 1.0)
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::EmptyText);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct Embedder {
    backend: EmbedBackend,
    dim: usize,
    seed: u64,
    llm: Option<Arc<LlmClient>>,
}

impl Default for Embedder {
    fn default() -> Self {
        Self::hashed(DEFAULT_DIM)
    }
}

impl Embedder {
    pub fn hashed(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            backend: EmbedBackend::HashedTfidf,
            dim,
            seed: DEFAULT_HASH_SEED,
            llm: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Remote embeddings from the gateway's embeddings endpoint. `dim` is the
    /// expected vector length.
    pub fn remote(dim: usize, llm: Arc<LlmClient>) -> Self {
        Self {
            backend: EmbedBackend::Remote,
            llm: Some(llm),
            ..Self::hashed(dim)
        }
    }

    pub fn llm_judge(dim: usize, llm: Arc<LlmClient>) -> Self {
        Self {
            backend: EmbedBackend::LlmJudge,
            llm: Some(llm),
            ..Self::hashed(dim)
        }
    }

    pub fn backend(&self) -> EmbedBackend {
        self.backend
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Identifies the configuration that produced a vector; cached embeddings
    /// are reused only under an equal fingerprint.
    pub fn fingerprint(&self) -> String {
        let model = match (&self.backend, &self.llm) {
            (EmbedBackend::Remote, Some(llm)) => llm.config().embed_model.as_str(),
            _ => "",
        };
        let descriptor = format!("{:?}|{}|{:#x}|{}", self.backend, self.dim, self.seed, model);
        format!("{:016x}", XxHash64::oneshot(0, descriptor.as_bytes()))
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        match self.backend {
            EmbedBackend::HashedTfidf | EmbedBackend::LlmJudge => self.embed_hashed(text),
            EmbedBackend::Remote => {
                if tokenize(text).is_empty() {
                    return Err(Error::EmptyText);
                }
                let llm = self.llm.as_ref().expect("remote embedder has a client");
                let vector = llm.embed(&[text.to_string()])?.pop().unwrap_or_default();
                if vector.len() != self.dim {
                    return Err(Error::MalformedLlmOutput(format!(
                        "embedding has dimension {}, expected {}",
                        vector.len(),
                        self.dim
                    )));
                }
                normalize(vector).map_err(|_| Error::MalformedLlmOutput("zero embedding vector".into()))
            }
        }
    }

    fn embed_hashed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut counts = vec![0u32; self.dim];
        for token in &tokens {
            counts[bucket(token, self.seed, self.dim)] += 1;
        }
        let weights = counts.into_iter().map(|c| (1.0 + f64::from(c)).ln()).collect();
        normalize(weights)
    }

    /// Semantic similarity in `[0, 1]` between a scenario text and a pattern text.
    pub fn phi(&self, scenario_text: &str, pattern_text: &str) -> Result<f64> {
        if self.backend == EmbedBackend::LlmJudge {
            return self.judge(scenario_text, pattern_text);
        }
        let a = self.embed(scenario_text)?;
        let b = self.embed(pattern_text)?;
        Ok(cosine_unit(&a, &b))
    }

    /// Similarity between a precomputed scenario vector and a pattern text.
    pub fn phi_with_vector(
        &self,
        scenario_text: &str,
        scenario_vec: &[f64],
        pattern_text: &str,
        pattern_vec: &[f64],
    ) -> Result<f64> {
        if self.backend == EmbedBackend::LlmJudge {
            return self.judge(scenario_text, pattern_text);
        }
        Ok(cosine_unit(scenario_vec, pattern_vec))
    }

    fn judge(&self, scenario_text: &str, pattern_text: &str) -> Result<f64> {
        if tokenize(scenario_text).is_empty() || tokenize(pattern_text).is_empty() {
            return Err(Error::EmptyText);
        }
        #[derive(Serialize)]
        struct Payload<'a> {
            scenario: &'a str,
            failure_pattern: &'a str,
        }
        #[derive(Deserialize)]
        struct Judgment {
            score: f64,
        }
        let llm = self.llm.as_ref().expect("judge embedder has a client");
        let task = LlmTask::new(
            TaskKind::JudgeSimilarity,
            &Payload {
                scenario: scenario_text,
                failure_pattern: pattern_text,
            },
        );
        let judgment: Judgment =
            serde_json::from_value(llm.complete(&task)?).map_err(|e| Error::MalformedLlmOutput(e.to_string()))?;
        Ok((judgment.score / 100.0).clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Buckets of "fog" and "night" under the default seed at dim 512, computed
    /// independently with the Python `xxhash` package.
    const FOG_BUCKET: usize = 339;
    const NIGHT_BUCKET: usize = 171;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("A fog-bound  NIGHT, x 42 "), ["fog", "bound", "night", "42"]);
        assert!(tokenize("a b . !").is_empty());
    }

    #[test]
    fn hashed_weights_match_hand_computation() {
        let e = Embedder::default();
        assert_eq!(bucket("fog", DEFAULT_HASH_SEED, 512), FOG_BUCKET);
        assert_eq!(bucket("night", DEFAULT_HASH_SEED, 512), NIGHT_BUCKET);
        let v = e.embed("fog fog night").unwrap();
        let (fog, night) = (3f64.ln(), 2f64.ln());
        let norm = (fog * fog + night * night).sqrt();
        assert!((v[FOG_BUCKET] - fog / norm).abs() < 1e-12);
        assert!((v[NIGHT_BUCKET] - night / norm).abs() < 1e-12);
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 2);
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = Embedder::default();
        assert!(matches!(e.embed(""), Err(Error::EmptyText)));
        assert!(matches!(e.embed("a ! ?"), Err(Error::EmptyText)));
        assert!(matches!(e.phi("fog", ""), Err(Error::EmptyText)));
    }

    #[test]
    fn disjoint_buckets_give_zero_similarity() {
        let e = Embedder::default();
        let a = "fog night";
        let b = "highway merge";
        let buckets = |t: &str| {
            tokenize(t)
                .iter()
                .map(|w| bucket(w, DEFAULT_HASH_SEED, 512))
                .collect::<Vec<_>>()
        };
        let (ba, bb) = (buckets(a), buckets(b));
        assert!(ba.iter().all(|x| !bb.contains(x)), "fixture must not collide");
        assert!(e.phi(a, b).unwrap().abs() < 1e-9);
    }

    #[test]
    fn fingerprint_tracks_configuration() {
        let base = Embedder::hashed(512);
        assert_eq!(base.fingerprint(), Embedder::hashed(512).fingerprint());
        assert_ne!(base.fingerprint(), Embedder::hashed(256).fingerprint());
        assert_ne!(base.fingerprint(), Embedder::hashed(512).with_seed(7).fingerprint());
    }

    fn arb_text() -> impl Strategy<Value = String> {
        prop::collection::vec("[a-z]{2,8}", 1..12).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn embeddings_are_unit_norm(t in arb_text()) {
            let v = Embedder::default().embed(&t).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }

        #[test]
        fn phi_range_symmetry_and_identity(a in arb_text(), b in arb_text()) {
            let e = Embedder::default();
            let ab = e.phi(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab.to_bits(), e.phi(&b, &a).unwrap().to_bits());
            prop_assert!((e.phi(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn embedding_is_deterministic(t in arb_text()) {
            let e = Embedder::default();
            let v1: Vec<u64> = e.embed(&t).unwrap().iter().map(|x| x.to_bits()).collect();
            let v2: Vec<u64> = Embedder::default().embed(&t).unwrap().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(v1, v2);
        }
    }
}
