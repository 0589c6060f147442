//! Prompt tokenisation, lexicon-based entity extraction, and a seeded stub
//! text encoder producing unit-norm token embeddings.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::error::{HierarqError, Result};
use crate::tensor::{Scalar, Tensor};

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.txt");

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityLexicon {
    words: BTreeSet<String>,
}

impl EntityLexicon {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The shipped list of common nouns.
    pub fn builtin() -> Self {
        Self::from_text(BUILTIN_LEXICON)
    }

    /// One token per line; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        EntityLexicon { words }
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        EntityLexicon {
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HierarqError::io(path, e))?;
        Ok(Self::from_text(&text))
    }

    pub fn extend(&mut self, other: &EntityLexicon) {
        self.words.extend(other.words.iter().cloned());
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Lowercase, drop punctuation, split on whitespace.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Prompt tokens found in the lexicon, deduplicated in order of first use.
pub fn extract_entities(prompt: &str, lexicon: &EntityLexicon) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokenize(prompt)
        .into_iter()
        .filter(|t| lexicon.contains(t) && seen.insert(t.clone()))
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn token_rng(token: &str, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// One unit-norm Gaussian direction per token, a pure function of
/// `(token, dim, seed)`.
pub fn embed_tokens<T: Scalar>(tokens: &[String], dim: usize, seed: u64) -> Result<Tensor<T>> {
    if dim == 0 {
        return Err(HierarqError::Config("embedding dim must be at least 1".into()));
    }
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for tok in tokens {
        let mut rng = token_rng(tok, seed);
        let mut row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row[0] = 1.0;
        }
        data.extend(row.into_iter().map(T::lit));
    }
    Tensor::new(&[tokens.len(), dim], data)
}

#[derive(Debug, Clone)]
pub struct PromptBundle<T> {
    pub raw_text: String,
    /// Tokens covered by the scene embedding (after truncation).
    pub scene_tokens: Vec<String>,
    pub entity_tokens: Vec<String>,
    pub entity_emb: Option<Tensor<T>>,
    pub scene_emb: Tensor<T>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> PromptBundle<T> {
    /// True when no entity was found and the entity stream falls back to
    /// raw frame features.
    pub fn entity_fallback(&self) -> bool {
        self.entity_emb.is_none()
    }
}

pub fn build_prompt_bundle<T: Scalar>(
    prompt: &str,
    lexicon: &EntityLexicon,
    cfg: &ModelConfig,
) -> Result<PromptBundle<T>> {
    let mut scene_tokens = tokenize(prompt);
    if scene_tokens.is_empty() {
        return Err(HierarqError::Input(format!("prompt {prompt:?} has no tokens")));
    }
    let mut warnings = Vec::new();
    if scene_tokens.len() > cfg.max_prompt_tokens {
        warnings.push(format!(
            "prompt truncated from {} to {} tokens",
            scene_tokens.len(),
            cfg.max_prompt_tokens
        ));
        scene_tokens.truncate(cfg.max_prompt_tokens);
    }
    let entity_tokens = extract_entities(prompt, lexicon);
    let entity_emb = if entity_tokens.is_empty() {
        None
    } else {
        Some(embed_tokens(&entity_tokens, cfg.text_dim, cfg.seed)?)
    };
    let scene_emb = embed_tokens(&scene_tokens, cfg.text_dim, cfg.seed)?;
    Ok(PromptBundle {
        raw_text: prompt.to_string(),
        scene_tokens,
        entity_tokens,
        entity_emb,
        scene_emb,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_similarity;

    fn lex(words: &[&str]) -> EntityLexicon {
        EntityLexicon::from_words(words)
    }

    #[test]
    fn entity_examples() {
        assert_eq!(
            extract_entities("What is the man holding?", &lex(&["man", "dog", "ball"])),
            vec!["man"]
        );
        assert_eq!(extract_entities("Describe the video.", &lex(&["video"])), vec!["video"]);
        assert!(extract_entities("Is it raining?", &lex(&["man", "dog"])).is_empty());
    }

    #[test]
    fn entities_dedup_in_first_occurrence_order() {
        let l = lex(&["dog", "ball"]);
        assert_eq!(extract_entities("Ball, dog, BALL and dog!", &l), vec!["ball", "dog"]);
    }

    #[test]
    fn lexicon_file_format() {
        let l = EntityLexicon::from_text("# nouns\nMan\n\ndog\nman\n");
        assert_eq!(l.len(), 2);
        assert!(l.contains("MAN"));
        assert!(EntityLexicon::builtin().len() >= 200);
    }

    #[test]
    fn embeddings_are_deterministic_unit_rows() {
        let toks = vec!["man".to_string(), "dog".to_string(), "man".to_string()];
        let a = embed_tokens::<f64>(&toks, 16, 3).unwrap();
        let b = embed_tokens::<f64>(&toks, 16, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.row(0), a.row(2));
        for r in 0..3 {
            let n: f64 = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let c = embed_tokens::<f64>(&toks, 16, 4).unwrap();
        assert_ne!(a.row(0), c.row(0));
    }

    #[test]
    fn distinct_tokens_are_nearly_orthogonal() {
        let mut close = 0;
        for i in 0..1000 {
            let toks = vec![format!("tok{i}a"), format!("tok{i}b")];
            let e = embed_tokens::<f64>(&toks, 64, 0).unwrap();
            let a = Tensor::new(&[64], e.row(0).to_vec()).unwrap();
            let b = Tensor::new(&[64], e.row(1).to_vec()).unwrap();
            if cosine_similarity(&a, &b).unwrap().abs() >= 0.5 {
                close += 1;
            }
        }
        assert!(close <= 10, "{close} of 1000 pairs had |cos| >= 0.5");
    }

    #[test]
    fn bundle_examples() {
        let cfg = ModelConfig::desk();
        let b = build_prompt_bundle::<f64>("man ball", &lex(&["man", "ball"]), &cfg).unwrap();
        assert_eq!(b.entity_emb.as_ref().unwrap().rows(), 2);
        assert_eq!(b.scene_emb.rows(), 2);

        let b = build_prompt_bundle::<f64>("hello there", &EntityLexicon::empty(), &cfg).unwrap();
        assert!(b.entity_fallback());
        assert_eq!(b.scene_emb.rows(), 2);

        let again = build_prompt_bundle::<f64>("hello there", &EntityLexicon::empty(), &cfg).unwrap();
        assert_eq!(b.scene_emb, again.scene_emb);
    }

    #[test]
    fn long_prompts_truncate_with_warning() {
        let cfg = ModelConfig {
            max_prompt_tokens: 3,
            ..ModelConfig::desk()
        };
        let b = build_prompt_bundle::<f32>("a b c d e", &EntityLexicon::empty(), &cfg).unwrap();
        assert_eq!(b.scene_emb.rows(), 3);
        assert_eq!(b.warnings.len(), 1);
        assert!(build_prompt_bundle::<f32>("?!", &EntityLexicon::empty(), &cfg).is_err());
    }
}
