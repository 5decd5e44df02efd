//! Symbolic token vocabulary.
//!
//! A micro-vocabulary of 64 named symbols (digits, option letters, task
//! keywords, prompt words, specials) replaces a subword tokenizer; the
//! mechanism under study operates on span types, not linguistic content.
//! The vocabulary is extended with K latent tokens whose ids occupy the
//! contiguous range [base_size, base_size + K).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2-way, 3-way, and 4-way tasks draw their option letters from this order.
pub const OPTION_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// The 64 base symbols, in id order. Specials first, then digits, option
/// letters, task keywords, and prompt words.
pub const BASE_SYMBOLS: [&str; 64] = [
    "<pad>", "<bos>", "<eos>", "<ans>", // specials
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", // digits
    "A", "B", "C", "D", // option letters
    "count", "localize", "jigsaw", "reflect", "viscorr", // generated tasks
    "artstyle", "semcorr", "funccorr", "vissim", // registry-only tasks
    "how", "many", "which", "box", "patch", "point", "darker", "same", "about", "style",
    "similar", "matches", "fits", "completes", "best", "the", "object", "image", "ref", "is",
    "are", "there", "a", "b", "left", "right", "top", "bottom", "near", "far", "light", "dark",
    "shape", "question", "answer", "option", "?",
];

/// The perception task families. The first five have procedural generators;
/// the rest exist only in the prompt-template registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Counting,
    Localization,
    Jigsaw,
    Reflectance,
    Correspondence,
    ArtStyle,
    SemanticCorrespondence,
    FunctionalCorrespondence,
    VisualSimilarity,
}

impl TaskKind {
    pub const GENERATED: [TaskKind; 5] = [
        TaskKind::Counting,
        TaskKind::Localization,
        TaskKind::Jigsaw,
        TaskKind::Reflectance,
        TaskKind::Correspondence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Counting => "counting",
            TaskKind::Localization => "localization",
            TaskKind::Jigsaw => "jigsaw",
            TaskKind::Reflectance => "reflectance",
            TaskKind::Correspondence => "correspondence",
            TaskKind::ArtStyle => "artstyle",
            TaskKind::SemanticCorrespondence => "semcorr",
            TaskKind::FunctionalCorrespondence => "funccorr",
            TaskKind::VisualSimilarity => "vissim",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "counting" => Ok(TaskKind::Counting),
            "localization" => Ok(TaskKind::Localization),
            "jigsaw" => Ok(TaskKind::Jigsaw),
            "reflectance" => Ok(TaskKind::Reflectance),
            "correspondence" => Ok(TaskKind::Correspondence),
            "artstyle" => Ok(TaskKind::ArtStyle),
            "semcorr" => Ok(TaskKind::SemanticCorrespondence),
            "funccorr" => Ok(TaskKind::FunctionalCorrespondence),
            "vissim" => Ok(TaskKind::VisualSimilarity),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }

    /// True for the kinds with a procedural generator.
    pub fn has_generator(self) -> bool {
        TaskKind::GENERATED.contains(&self)
    }

    /// Number of multiple-choice options; None for open-ended counting.
    pub fn n_options(self) -> Option<usize> {
        match self {
            TaskKind::Counting => None,
            TaskKind::Reflectance => Some(3),
            TaskKind::Correspondence
            | TaskKind::SemanticCorrespondence
            | TaskKind::FunctionalCorrespondence => Some(4),
            _ => Some(2),
        }
    }

    /// Symbolic prompt template (stand-in for the per-task question text).
    pub fn prompt_template(self) -> &'static [&'static str] {
        match self {
            TaskKind::Counting => &["<bos>", "count", "how", "many", "?"],
            TaskKind::Localization => &["<bos>", "localize", "which", "box", "?"],
            TaskKind::Jigsaw => &["<bos>", "jigsaw", "which", "patch", "?"],
            TaskKind::Reflectance => &["<bos>", "reflect", "which", "darker", "?"],
            TaskKind::Correspondence => &["<bos>", "viscorr", "which", "point", "?"],
            TaskKind::ArtStyle => &["<bos>", "artstyle", "which", "similar", "?"],
            TaskKind::SemanticCorrespondence => &["<bos>", "semcorr", "which", "point", "?"],
            TaskKind::FunctionalCorrespondence => &["<bos>", "funccorr", "which", "point", "?"],
            TaskKind::VisualSimilarity => &["<bos>", "vissim", "which", "similar", "?"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    base_tokens: Vec<String>,
    latent_count: usize,
}

impl Vocabulary {
    /// Build a vocabulary from unique base symbols plus K latent tokens.
    /// Ids are assigned in input order; latent ids come last.
    pub fn build(base_symbols: &[&str], latent_count: usize) -> Result<Vocabulary> {
        let mut seen = std::collections::HashSet::new();
        for s in base_symbols {
            if !seen.insert(*s) {
                return Err(Error::Vocab(format!("duplicate symbol `{s}`")));
            }
        }
        Ok(Vocabulary {
            base_tokens: base_symbols.iter().map(|s| s.to_string()).collect(),
            latent_count,
        })
    }

    /// The default 64-symbol base vocabulary with K latent tokens.
    pub fn default_with_latents(latent_count: usize) -> Vocabulary {
        Vocabulary::build(&BASE_SYMBOLS, latent_count).expect("base symbols are unique")
    }

    pub fn base_size(&self) -> usize {
        self.base_tokens.len()
    }

    pub fn latent_count(&self) -> usize {
        self.latent_count
    }

    pub fn total_size(&self) -> usize {
        self.base_tokens.len() + self.latent_count
    }

    /// Ids of the latent tokens: [base_size, base_size + K).
    pub fn latent_ids(&self) -> std::ops::Range<usize> {
        self.base_size()..self.total_size()
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.base_tokens
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::Vocab(format!("unknown symbol `{symbol}`")))
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        if id < self.base_size() {
            Ok(&self.base_tokens[id])
        } else if id < self.total_size() {
            // Latent tokens have no surface form; give them a stable name.
            Err(Error::Vocab(format!("id {id} is a latent token")))
        } else {
            Err(Error::Vocab(format!("id {id} out of range")))
        }
    }

    pub fn pad(&self) -> usize {
        self.id("<pad>").unwrap()
    }

    pub fn bos(&self) -> usize {
        self.id("<bos>").unwrap()
    }

    pub fn eos(&self) -> usize {
        self.id("<eos>").unwrap()
    }

    /// The answer-cue token that opens every answer span. It plays the role
    /// of the assistant-turn delimiter in a chat template: generation is
    /// seeded with it, and it is present whether or not latents are.
    pub fn ans(&self) -> usize {
        self.id("<ans>").unwrap()
    }

    pub fn digit(&self, d: u32) -> usize {
        assert!(d < 10);
        self.id(&d.to_string()).unwrap()
    }

    pub fn letter(&self, index: usize) -> usize {
        self.id(OPTION_LETTERS[index]).unwrap()
    }

    /// Index of an option letter id (A→0 ... D→3), if it is one.
    pub fn letter_index(&self, id: usize) -> Option<usize> {
        OPTION_LETTERS
            .iter()
            .position(|l| self.id(l).unwrap() == id)
    }

    pub fn is_digit(&self, id: usize) -> bool {
        (0..10).any(|d| self.digit(d) == id)
    }

    pub fn digit_value(&self, id: usize) -> Option<u32> {
        (0..10).find(|&d| self.digit(d) == id)
    }

    /// Encode a task prompt from its template.
    pub fn encode_prompt(&self, kind: TaskKind) -> Result<Vec<usize>> {
        kind.prompt_template()
            .iter()
            .map(|s| self.id(s))
            .collect()
    }

    /// Encode an MCQ answer: a single option-letter token.
    pub fn encode_mcq_answer(&self, letter_index: usize) -> Vec<usize> {
        vec![self.letter(letter_index)]
    }

    /// Encode a counting answer: most-significant-digit first, then EOS.
    pub fn encode_count_answer(&self, count: u32) -> Vec<usize> {
        let mut ids = Vec::new();
        for ch in count.to_string().chars() {
            ids.push(self.digit(ch.to_digit(10).unwrap()));
        }
        ids.push(self.eos());
        ids
    }

    /// Decode base-token ids back to their symbols.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.symbol(i).map(str::to_string)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_vocabulary_has_64_unique_symbols() {
        let v = Vocabulary::default_with_latents(16);
        assert_eq!(v.base_size(), 64);
        assert_eq!(v.total_size(), 80);
    }

    #[test]
    fn zero_latents_gives_empty_latent_range() {
        let v = Vocabulary::default_with_latents(0);
        assert_eq!(v.total_size(), v.base_size());
        assert!(v.latent_ids().is_empty());
    }

    #[test]
    fn latent_ids_are_contiguous_and_last() {
        let v = Vocabulary::default_with_latents(4);
        assert_eq!(v.latent_ids().collect::<Vec<_>>(), vec![64, 65, 66, 67]);
    }

    #[test]
    fn duplicate_symbols_rejected() {
        assert!(Vocabulary::build(&["a", "b", "a"], 0).is_err());
    }

    #[test]
    fn mcq_answer_is_single_letter_token() {
        let v = Vocabulary::default_with_latents(16);
        assert_eq!(v.encode_mcq_answer(1), vec![v.id("B").unwrap()]);
    }

    #[test]
    fn count_answers_are_digits_plus_eos() {
        let v = Vocabulary::default_with_latents(16);
        assert_eq!(v.encode_count_answer(7), vec![v.digit(7), v.eos()]);
        assert_eq!(v.encode_count_answer(10), vec![v.digit(1), v.digit(0), v.eos()]);
    }

    #[test]
    fn round_trip_all_base_symbols() {
        let v = Vocabulary::default_with_latents(0);
        for (id, sym) in BASE_SYMBOLS.iter().enumerate() {
            assert_eq!(v.id(sym).unwrap(), id);
            assert_eq!(v.symbol(id).unwrap(), *sym);
        }
    }

    #[test]
    fn unknown_symbol_is_an_error() {
        let v = Vocabulary::default_with_latents(0);
        assert!(v.id("no-such-token").is_err());
    }
}
