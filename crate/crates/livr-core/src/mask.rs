//! Attention-mask construction and information-flow analysis.
//!
//! A `MaskPolicy` is a declarative rule set over span types; `build_mask`
//! compiles it against a `SequenceLayout` into one boolean query×key matrix
//! shared by every layer. `assert_policy` re-derives the expected matrix
//! from the rules through a separate elementwise interpreter, and
//! `reachability` computes the multi-layer information flow closure that
//! makes the bottleneck property checkable as a graph statement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{SequenceLayout, SpanKind};

/// Visibility rule sets. All variants are causal; they differ in which
/// span-to-span blocks are removed on top of causality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Plain causal attention.
    Standard,
    /// Causal, minus answer→image and prompt→image: visual information can
    /// reach the answer only through the latent tokens.
    Bottleneck,
    /// Causal, minus answer→image only. The prompt still sees the image,
    /// which leaks visual information around the latents.
    AnsToVisOnly,
    /// Bottleneck plus latent→prompt blocked: latents cannot read the
    /// question while encoding the image.
    BottleneckPlusLatentPromptBlock,
}

impl MaskPolicy {
    pub fn name(self) -> &'static str {
        match self {
            MaskPolicy::Standard => "standard",
            MaskPolicy::Bottleneck => "bottleneck",
            MaskPolicy::AnsToVisOnly => "ans_to_vis_only",
            MaskPolicy::BottleneckPlusLatentPromptBlock => "bottleneck_latent_prompt_block",
        }
    }

    pub fn parse(s: &str) -> Result<MaskPolicy> {
        match s {
            "standard" => Ok(MaskPolicy::Standard),
            "bottleneck" => Ok(MaskPolicy::Bottleneck),
            "ans_to_vis_only" => Ok(MaskPolicy::AnsToVisOnly),
            "bottleneck_latent_prompt_block" => Ok(MaskPolicy::BottleneckPlusLatentPromptBlock),
            other => Err(Error::Config(format!("unknown mask policy `{other}`"))),
        }
    }

    /// The declarative rule: may a query in span `q` attend a key in span
    /// `k`, causality aside?
    fn span_rule(self, q: SpanKind, k: SpanKind) -> bool {
        use SpanKind::*;
        match self {
            MaskPolicy::Standard => true,
            MaskPolicy::Bottleneck => !matches!((q, k), (Answer, Image) | (Prompt, Image)),
            MaskPolicy::AnsToVisOnly => !matches!((q, k), (Answer, Image)),
            MaskPolicy::BottleneckPlusLatentPromptBlock => {
                !matches!((q, k), (Answer, Image) | (Prompt, Image) | (Latent, Prompt))
            }
        }
    }
}

/// A compiled boolean visibility matrix plus the layout it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    /// Row-major [total_len × total_len]; `allowed[q*n + k]`.
    allowed: Vec<bool>,
    pub layout: SequenceLayout,
}

/// Compile a policy against a layout.
///
/// Positions listed in `pad_positions` are blocked as keys for every other
/// query (their own rows are left causal; nothing reads their outputs).
pub fn build_mask(policy: MaskPolicy, layout: &SequenceLayout) -> Result<AttentionMask> {
    build_mask_padded(policy, layout, &[])
}

pub fn build_mask_padded(
    policy: MaskPolicy,
    layout: &SequenceLayout,
    pad_positions: &[usize],
) -> Result<AttentionMask> {
    layout.validate().map_err(|e| Error::Mask(format!("invalid layout: {e}")))?;
    if policy != MaskPolicy::Standard
        && layout.prompt_span.is_empty()
        && !layout.answer_span.is_empty()
    {
        // With no prompt the first answer position could be left with
        // nothing but itself to attend under the blocked rule sets.
        return Err(Error::Mask("degenerate layout: empty prompt under a blocking policy".into()));
    }
    let n = layout.total_len;
    let mut allowed = vec![false; n * n];
    // Constructive compilation: start from the causal triangle, then clear
    // the span blocks the policy names. (assert_policy re-derives the same
    // matrix elementwise as an independent check.)
    for q in 0..n {
        for k in 0..=q {
            allowed[q * n + k] = true;
        }
    }
    let mut clear = |qs: &std::ops::Range<usize>, ks: &std::ops::Range<usize>| {
        for q in qs.clone() {
            for k in ks.clone() {
                if q != k {
                    allowed[q * n + k] = false;
                }
            }
        }
    };
    match policy {
        MaskPolicy::Standard => {}
        MaskPolicy::Bottleneck => {
            clear(&layout.answer_span.clone(), &layout.image_span.clone());
            clear(&layout.prompt_span.clone(), &layout.image_span.clone());
        }
        MaskPolicy::AnsToVisOnly => {
            clear(&layout.answer_span.clone(), &layout.image_span.clone());
        }
        MaskPolicy::BottleneckPlusLatentPromptBlock => {
            clear(&layout.answer_span.clone(), &layout.image_span.clone());
            clear(&layout.prompt_span.clone(), &layout.image_span.clone());
            clear(&layout.latent_span.clone(), &layout.prompt_span.clone());
        }
    }
    for &p in pad_positions {
        for q in 0..n {
            if q != p {
                allowed[q * n + p] = false;
            }
        }
    }
    let mask = AttentionMask { allowed, layout: layout.clone() };
    for q in 0..n {
        if !(0..n).any(|k| mask.is_allowed(q, k)) {
            return Err(Error::Mask(format!("fully blocked row {q}")));
        }
    }
    Ok(mask)
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.layout.total_len
    }

    pub fn is_empty(&self) -> bool {
        self.layout.total_len == 0
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len() + k]
    }

    /// Blocked-entry view for `masked_fill` (true where attention must not
    /// flow).
    pub fn blocked_flat(&self) -> Vec<bool> {
        self.allowed.iter().map(|&a| !a).collect()
    }

    fn set(&mut self, q: usize, k: usize, v: bool) {
        let n = self.len();
        self.allowed[q * n + k] = v;
    }

    /// Flip one entry; used by tests to exercise mismatch reporting.
    pub fn corrupt(&mut self, q: usize, k: usize) {
        let cur = self.is_allowed(q, k);
        self.set(q, k, !cur);
    }

    /// Text grid of 0/1 per (query,key) with span annotations, suitable for
    /// golden-file comparisons.
    pub fn dump_text(&self) -> String {
        let n = self.len();
        let l = &self.layout;
        let mut out = String::new();
        out.push_str(&format!(
            "# spans image={:?} prompt={:?} latent={:?} answer={:?}\n",
            l.image_span, l.prompt_span, l.latent_span, l.answer_span
        ));
        let tag = |p: usize| match l.span_of(p) {
            SpanKind::Image => 'I',
            SpanKind::Prompt => 'P',
            SpanKind::Latent => 'L',
            SpanKind::Answer => 'A',
        };
        out.push_str("#    ");
        for k in 0..n {
            out.push(tag(k));
        }
        out.push('\n');
        for q in 0..n {
            out.push_str(&format!("{:>3}{} ", q, tag(q)));
            for k in 0..n {
                out.push(if self.is_allowed(q, k) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Result of re-deriving a mask from its policy through the independent
/// elementwise interpreter.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyReport {
    pub pass: bool,
    /// First differing (query, key) coordinates, at most 10.
    pub mismatches: Vec<(usize, usize)>,
}

/// Independent elementwise interpreter for the policy rules. This is the
/// second route of the dual check: it never reuses `build_mask`'s
/// constructive block-clearing.
pub fn expected_allowed(policy: MaskPolicy, layout: &SequenceLayout, q: usize, k: usize) -> bool {
    if k > q {
        return false; // causality
    }
    if q == k {
        return true; // self-attention is never blocked
    }
    policy.span_rule(layout.span_of(q), layout.span_of(k))
}

/// Compare a compiled mask against the rule interpreter, elementwise.
pub fn assert_policy(mask: &AttentionMask, policy: MaskPolicy, layout: &SequenceLayout) -> PolicyReport {
    let n = layout.total_len;
    let mut mismatches = Vec::new();
    for q in 0..n {
        for k in 0..n {
            let want = expected_allowed(policy, layout, q, k);
            if mask.is_allowed(q, k) != want && mismatches.len() < 10 {
                mismatches.push((q, k));
            }
        }
    }
    PolicyReport { pass: mismatches.is_empty(), mismatches }
}

/// Multi-layer information flow: entry [s][t] is true iff information at
/// position s can reach position t through any number of attention layers.
///
/// Edges run key→query for every allowed pair plus self-loops; positions in
/// `exclude_span` are deleted from the graph first (their rows and columns
/// are all false in the result).
pub fn reachability(
    mask: &AttentionMask,
    exclude_span: Option<std::ops::Range<usize>>,
) -> Vec<Vec<bool>> {
    let n = mask.len();
    let excluded = |p: usize| exclude_span.as_ref().is_some_and(|r| r.contains(&p));
    // adjacency: out_edges[s] = queries that may attend key s
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for q in 0..n {
        if excluded(q) {
            continue;
        }
        for k in 0..n {
            if k != q && !excluded(k) && mask.is_allowed(q, k) {
                out_edges[k].push(q);
            }
        }
    }
    let mut reach = vec![vec![false; n]; n];
    for s in 0..n {
        if excluded(s) {
            continue;
        }
        // BFS along key→query edges.
        let row = &mut reach[s];
        let mut stack = vec![s];
        row[s] = true;
        while let Some(u) = stack.pop() {
            for &v in &out_edges[u] {
                if !row[v] {
                    row[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    reach
}

/// True iff any position of `from` reaches any position of `to`.
pub fn any_flow(
    reach: &[Vec<bool>],
    from: &std::ops::Range<usize>,
    to: &std::ops::Range<usize>,
) -> bool {
    from.clone().any(|s| to.clone().any(|t| reach[s][t]))
}

/// True iff every position of `from` reaches every position of `to`.
pub fn all_flow(
    reach: &[Vec<bool>],
    from: &std::ops::Range<usize>,
    to: &std::ops::Range<usize>,
) -> bool {
    from.clone().all(|s| to.clone().all(|t| reach[s][t]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, LatentPlacement};

    fn layout_4322() -> SequenceLayout {
        build_layout(4, 3, 2, LatentPlacement::AfterPrompt, 2)
    }

    #[test]
    fn standard_is_lower_triangular() {
        let l = layout_4322();
        let m = build_mask(MaskPolicy::Standard, &l).unwrap();
        for q in 0..11 {
            for k in 0..11 {
                assert_eq!(m.is_allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn bottleneck_blocks_match_hand_derivation() {
        let l = layout_4322();
        let m = build_mask(MaskPolicy::Bottleneck, &l).unwrap();
        // answer row 9 blocked from image keys
        for k in 0..4 {
            assert!(!m.is_allowed(9, k));
            assert!(!m.is_allowed(10, k));
        }
        // prompt rows blocked from image keys
        for q in 4..7 {
            for k in 0..4 {
                assert!(!m.is_allowed(q, k));
            }
        }
        // latents see the image
        for k in 0..4 {
            assert!(m.is_allowed(7, k));
            assert!(m.is_allowed(8, k));
        }
        // everything else causal
        for q in 0..11 {
            for k in 0..11 {
                let expect = expected_allowed(MaskPolicy::Bottleneck, &l, q, k);
                assert_eq!(m.is_allowed(q, k), expect, "({q},{k})");
            }
        }
    }

    #[test]
    fn ans_to_vis_only_keeps_prompt_to_image() {
        let l = layout_4322();
        let m = build_mask(MaskPolicy::AnsToVisOnly, &l).unwrap();
        for q in 4..7 {
            for k in 0..4 {
                assert!(m.is_allowed(q, k), "prompt must still attend image");
            }
        }
        for q in 9..11 {
            for k in 0..4 {
                assert!(!m.is_allowed(q, k), "answer blocked from image");
            }
        }
    }

    #[test]
    fn self_attention_never_blocked() {
        let l = layout_4322();
        for policy in [
            MaskPolicy::Standard,
            MaskPolicy::Bottleneck,
            MaskPolicy::AnsToVisOnly,
            MaskPolicy::BottleneckPlusLatentPromptBlock,
        ] {
            let m = build_mask(policy, &l).unwrap();
            for q in 0..11 {
                assert!(m.is_allowed(q, q), "{policy:?} row {q}");
            }
        }
    }

    #[test]
    fn assert_policy_passes_own_output_and_catches_corruption() {
        let l = layout_4322();
        let mut m = build_mask(MaskPolicy::Bottleneck, &l).unwrap();
        assert!(assert_policy(&m, MaskPolicy::Bottleneck, &l).pass);
        m.corrupt(9, 0);
        let report = assert_policy(&m, MaskPolicy::Bottleneck, &l);
        assert!(!report.pass);
        assert_eq!(report.mismatches[0], (9, 0));
    }

    #[test]
    fn standard_reaches_everything_later() {
        let l = layout_4322();
        let m = build_mask(MaskPolicy::Standard, &l).unwrap();
        let r = reachability(&m, None);
        for s in 0..11 {
            for t in s..11 {
                assert!(r[s][t], "{s} must reach {t}");
            }
        }
    }

    #[test]
    fn bottleneck_theorem_on_the_spec_layout() {
        let l = layout_4322();
        let m = build_mask(MaskPolicy::Bottleneck, &l).unwrap();
        let without = reachability(&m, Some(l.latent_span.clone()));
        assert!(!any_flow(&without, &l.image_span, &l.answer_span));
        let with = reachability(&m, None);
        assert!(all_flow(&with, &l.image_span, &l.answer_span));
    }

    #[test]
    fn ans_to_vis_only_leaks_through_prompt() {
        let l = layout_4322();
        let m = build_mask(MaskPolicy::AnsToVisOnly, &l).unwrap();
        let without = reachability(&m, Some(l.latent_span.clone()));
        assert!(any_flow(&without, &l.image_span, &l.answer_span));
    }

    #[test]
    fn empty_prompt_under_bottleneck_rejected() {
        let l = build_layout(4, 0, 2, LatentPlacement::AfterPrompt, 2);
        assert!(build_mask(MaskPolicy::Bottleneck, &l).is_err());
        assert!(build_mask(MaskPolicy::Standard, &l).is_ok());
    }

    #[test]
    fn pad_positions_blocked_as_keys() {
        let l = layout_4322();
        let m = build_mask_padded(MaskPolicy::Standard, &l, &[5]).unwrap();
        for q in 6..11 {
            assert!(!m.is_allowed(q, 5));
        }
        assert!(m.is_allowed(5, 5));
    }
}
