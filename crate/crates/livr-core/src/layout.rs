//! Typed span layout of a training sequence.
//!
//! Every sequence is four contiguous spans — image, prompt, latent, answer —
//! in that order for the default after-prompt latent placement, or with the
//! latent span ahead of the prompt for the position ablation. Masks, the
//! loss rule, and the diagnostics all read spans, never raw indices.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPlacement {
    AfterPrompt,
    BeforePrompt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentEmbeddings {
    Unshared,
    Shared,
}

/// Latent-token configuration: how many, where they sit, whether they share
/// one embedding row, and whether those rows receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub k: usize,
    pub placement: LatentPlacement,
    pub embeddings: LatentEmbeddings,
    pub rows_trainable: bool,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            k: 16,
            placement: LatentPlacement::AfterPrompt,
            embeddings: LatentEmbeddings::Unshared,
            rows_trainable: true,
        }
    }
}

impl LatentConfig {
    /// Number of distinct embedding rows backing the K latent tokens.
    pub fn embedding_rows(&self) -> usize {
        match self.embeddings {
            LatentEmbeddings::Unshared => self.k,
            LatentEmbeddings::Shared => usize::from(self.k > 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub image_span: Range<usize>,
    pub prompt_span: Range<usize>,
    pub latent_span: Range<usize>,
    pub answer_span: Range<usize>,
    pub total_len: usize,
}

/// Compute the span layout for the given segment lengths and placement.
pub fn build_layout(
    n_image_tokens: usize,
    n_prompt_tokens: usize,
    k: usize,
    placement: LatentPlacement,
    n_answer_tokens: usize,
) -> SequenceLayout {
    let total = n_image_tokens + n_prompt_tokens + k + n_answer_tokens;
    let image = 0..n_image_tokens;
    let (prompt, latent) = match placement {
        LatentPlacement::AfterPrompt => {
            let prompt = image.end..image.end + n_prompt_tokens;
            let latent = prompt.end..prompt.end + k;
            (prompt, latent)
        }
        LatentPlacement::BeforePrompt => {
            let latent = image.end..image.end + k;
            let prompt = latent.end..latent.end + n_prompt_tokens;
            (prompt, latent)
        }
    };
    let answer_start = prompt.end.max(latent.end);
    SequenceLayout {
        image_span: image,
        prompt_span: prompt,
        latent_span: latent,
        answer_span: answer_start..answer_start + n_answer_tokens,
        total_len: total,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Image,
    Prompt,
    Latent,
    Answer,
}

impl SequenceLayout {
    pub fn span_of(&self, pos: usize) -> SpanKind {
        if self.image_span.contains(&pos) {
            SpanKind::Image
        } else if self.prompt_span.contains(&pos) {
            SpanKind::Prompt
        } else if self.latent_span.contains(&pos) {
            SpanKind::Latent
        } else if self.answer_span.contains(&pos) {
            SpanKind::Answer
        } else {
            panic!("position {pos} outside layout of length {}", self.total_len)
        }
    }

    pub fn k(&self) -> usize {
        self.latent_span.len()
    }

    /// Validate the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let mut spans: Vec<&Range<usize>> =
            vec![&self.image_span, &self.prompt_span, &self.latent_span, &self.answer_span];
        spans.sort_by_key(|r| r.start);
        let mut cursor = 0;
        for s in spans {
            if s.start != cursor && !s.is_empty() {
                return Err(Error::Config(format!(
                    "layout spans do not tile: gap before {}..{}",
                    s.start, s.end
                )));
            }
            if !s.is_empty() {
                cursor = s.end;
            } else if s.start > self.total_len {
                return Err(Error::Config("empty span anchored out of range".into()));
            }
        }
        if cursor != self.total_len {
            return Err(Error::Config(format!(
                "layout spans cover [0,{cursor}) but total_len is {}",
                self.total_len
            )));
        }
        Ok(())
    }

    /// The layout after physically removing the latent span. Remaining spans
    /// shift left; the answer span keeps its length.
    pub fn without_latents(&self) -> SequenceLayout {
        let k = self.k();
        let shift = |r: &Range<usize>| -> Range<usize> {
            if r.start >= self.latent_span.end {
                r.start - k..r.end - k
            } else {
                r.clone()
            }
        };
        SequenceLayout {
            image_span: shift(&self.image_span),
            prompt_span: shift(&self.prompt_span),
            latent_span: self.latent_span.start..self.latent_span.start,
            answer_span: shift(&self.answer_span),
            total_len: self.total_len - k,
        }
    }

    /// Canonical position ids for every slot in this layout. When
    /// `drop_latents` is set, latent slots are omitted but the remaining
    /// tokens keep the position ids they would have had with latents
    /// present, so a model that ignores latents computes identical
    /// activations either way.
    pub fn position_ids(&self, drop_latents: bool) -> Vec<usize> {
        if !drop_latents {
            return (0..self.total_len).collect();
        }
        (0..self.total_len)
            .filter(|p| !self.latent_span.contains(p))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn after_prompt_spans() {
        let l = build_layout(4, 3, 2, LatentPlacement::AfterPrompt, 2);
        assert_eq!(l.image_span, 0..4);
        assert_eq!(l.prompt_span, 4..7);
        assert_eq!(l.latent_span, 7..9);
        assert_eq!(l.answer_span, 9..11);
        assert_eq!(l.total_len, 11);
        l.validate().unwrap();
    }

    #[test]
    fn zero_latents_answer_abuts_prompt() {
        let l = build_layout(4, 3, 0, LatentPlacement::AfterPrompt, 2);
        assert!(l.latent_span.is_empty());
        assert_eq!(l.answer_span, 7..9);
        l.validate().unwrap();
    }

    #[test]
    fn before_prompt_spans() {
        let l = build_layout(4, 3, 2, LatentPlacement::BeforePrompt, 2);
        assert_eq!(l.latent_span, 4..6);
        assert_eq!(l.prompt_span, 6..9);
        assert_eq!(l.answer_span, 9..11);
        l.validate().unwrap();
    }

    #[test]
    fn without_latents_shifts_following_spans() {
        let l = build_layout(4, 3, 2, LatentPlacement::AfterPrompt, 2);
        let d = l.without_latents();
        assert_eq!(d.image_span, 0..4);
        assert_eq!(d.prompt_span, 4..7);
        assert!(d.latent_span.is_empty());
        assert_eq!(d.answer_span, 7..9);
        assert_eq!(d.total_len, 9);
        d.validate().unwrap();
    }

    #[test]
    fn dropped_positions_keep_canonical_ids() {
        let l = build_layout(4, 3, 2, LatentPlacement::AfterPrompt, 2);
        assert_eq!(l.position_ids(true), vec![0, 1, 2, 3, 4, 5, 6, 9, 10]);
        assert_eq!(l.position_ids(false), (0..11).collect::<Vec<_>>());
    }
}
