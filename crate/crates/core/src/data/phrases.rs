//! Phrase lists shipped with the crate: neutral sketch descriptions,
//! handcrafted prompts, and connecting words.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};

pub const NEUTRAL_TEXT: &str = include_str!("../../data/neutral_text.txt");
pub const HANDCRAFTED_PROMPTS: &str = include_str!("../../data/handcrafted_prompts.txt");
pub const CONNECTING_WORDS: &str = include_str!("../../data/connecting_words.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseKind {
    NeutralText,
    HandcraftedPrompt,
    ConnectingWord,
}

impl std::str::FromStr for PhraseKind {
    type Err = DuetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neutral_text" => Ok(Self::NeutralText),
            "handcrafted_prompt" => Ok(Self::HandcraftedPrompt),
            "connecting_word" => Ok(Self::ConnectingWord),
            other => Err(DuetError::Input(format!("unknown phrase kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseSet {
    pub kind: PhraseKind,
    pub phrases: Vec<String>,
}

impl PhraseSet {
    /// Parses one phrase per line, skipping blank lines.
    pub fn parse(kind: PhraseKind, text: &str) -> Result<Self> {
        let phrases: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let set = Self { kind, phrases };
        set.validate()?;
        Ok(set)
    }

    pub fn load(kind: PhraseKind, path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DuetError::load(path, e))?;
        Self::parse(kind, &text)
    }

    pub fn builtin(kind: PhraseKind) -> Self {
        let text = match kind {
            PhraseKind::NeutralText => NEUTRAL_TEXT,
            PhraseKind::HandcraftedPrompt => HANDCRAFTED_PROMPTS,
            PhraseKind::ConnectingWord => CONNECTING_WORDS,
        };
        Self::parse(kind, text).expect("bundled phrase lists are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.phrases.is_empty() {
            return Err(DuetError::Config(format!(
                "{:?} phrase set is empty",
                self.kind
            )));
        }
        if self.kind == PhraseKind::NeutralText {
            // The published list carries a handful of two-word entries.
            if let Some(bad) = self
                .phrases
                .iter()
                .find(|p| !(2..=5).contains(&p.split_whitespace().count()))
            {
                return Err(DuetError::Config(format!(
                    "neutral phrase {bad:?} is not a short generic description"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.iter().any(|p| p == phrase)
    }

    /// Uniform draw over list positions.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.phrases.len())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        &self.phrases[self.sample_index(rng)]
    }
}

/// The three bundled sets, addressable by kind.
#[derive(Debug, Clone)]
pub struct PhraseBook {
    pub neutral: PhraseSet,
    pub prompts: PhraseSet,
    pub connectors: PhraseSet,
}

impl Default for PhraseBook {
    fn default() -> Self {
        Self {
            neutral: PhraseSet::builtin(PhraseKind::NeutralText),
            prompts: PhraseSet::builtin(PhraseKind::HandcraftedPrompt),
            connectors: PhraseSet::builtin(PhraseKind::ConnectingWord),
        }
    }
}

impl PhraseBook {
    pub fn get(&self, kind: PhraseKind) -> &PhraseSet {
        match kind {
            PhraseKind::NeutralText => &self.neutral,
            PhraseKind::HandcraftedPrompt => &self.prompts,
            PhraseKind::ConnectingWord => &self.connectors,
        }
    }

    pub fn sample_phrase<R: Rng + ?Sized>(&self, kind: &str, rng: &mut R) -> Result<&str> {
        let kind: PhraseKind = kind.parse()?;
        Ok(self.get(kind).sample(rng))
    }
}

/// Text used to learn tokenizer merges for surrogate backbones: every
/// bundled phrase plus the fixture attribute vocabulary.
pub fn vocabulary_corpus() -> Vec<String> {
    let mut corpus: Vec<String> = [NEUTRAL_TEXT, HANDCRAFTED_PROMPTS, CONNECTING_WORDS]
        .iter()
        .flat_map(|t| t.lines())
        .map(String::from)
        .collect();
    corpus.extend(super::fixture::caption_vocabulary());
    corpus.extend(
        [
            "a photo of a shoe with red laces",
            "a photo of a shoe with blue laces",
            "a sketch of a chair",
            "in origami in tattoo in sculpture in painting",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bundled_lists_have_published_sizes() {
        let book = PhraseBook::default();
        assert_eq!(book.neutral.len(), 100);
        assert_eq!(book.prompts.len(), 41);
        assert_eq!(book.connectors.len(), 21);
        assert!(book.neutral.contains("with a line drawing"));
        assert!(book.prompts.contains("a photo of"));
        for w in ["is", "in", "having", "with", "as"] {
            assert!(book.connectors.contains(w), "{w}");
        }
    }

    #[test]
    fn sampling_is_seeded_and_in_set() {
        let book = PhraseBook::default();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = book
                .sample_phrase("connecting_word", &mut a)
                .unwrap()
                .to_string();
            assert_eq!(x, book.sample_phrase("connecting_word", &mut b).unwrap());
            assert!(book.connectors.contains(&x));
        }
        assert!(book.sample_phrase("adjective", &mut a).is_err());
    }

    #[test]
    fn empty_set_is_a_config_error() {
        assert!(matches!(
            PhraseSet::parse(PhraseKind::HandcraftedPrompt, "\n\n"),
            Err(DuetError::Config(_))
        ));
    }

    #[test]
    fn uniform_draws_pass_chi_square() {
        // 10^5 draws over 100 bins. The 0.999 quantile of chi^2 with 99
        // degrees of freedom is 148.23.
        let set = PhraseSet::builtin(PhraseKind::NeutralText);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000usize;
        let mut counts = vec![0usize; set.len()];
        for _ in 0..n {
            counts[set.sample_index(&mut rng)] += 1;
        }
        let expected = n as f64 / set.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 148.23, "chi^2 = {chi2}");
    }
}
