//! Latent-usage probes, accuracy evaluation, attention extraction, and
//! hidden-state export.
//!
//! Evaluation greedy-decodes each example; MCQ tasks score the first emitted
//! letter, counting scores the full digit string. Attention probes run
//! teacher-forced forwards with capture enabled and summarize how much mass
//! answer queries place on the latent span, and where each latent looks in
//! the patch grid.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::mask::{build_mask, MaskPolicy};
use crate::model::{CaptureOptions, Model};
use crate::taskgen::TaskExample;
use crate::tensor::Tensor;
use crate::vocab::TaskKind;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExampleResult {
    pub index: u64,
    pub emitted: Vec<usize>,
    pub gold: Vec<usize>,
    pub correct: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub policy: String,
    pub drop_latents: bool,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_example: Vec<ExampleResult>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}

fn max_new_for(kind: TaskKind) -> usize {
    match kind {
        TaskKind::Counting => 4,
        _ => 1,
    }
}

/// Score an emitted token sequence against the gold answer: MCQ tasks match
/// on the first emitted letter, counting on the exact digit string.
pub fn is_correct(kind: TaskKind, emitted: &[usize], gold: &[usize]) -> bool {
    match kind {
        TaskKind::Counting => emitted == gold,
        _ => emitted.first() == gold.first(),
    }
}

/// Evaluation core, generic over the decoder so tests can stub it.
pub fn evaluate_with<F>(
    examples: &[TaskExample],
    mut decode: F,
    policy: MaskPolicy,
    drop_latents: bool,
) -> Result<EvalReport>
where
    F: FnMut(&TaskExample) -> Result<Vec<usize>>,
{
    let mut per_example = Vec::with_capacity(examples.len());
    let mut correct = 0usize;
    for ex in examples {
        let emitted = decode(ex)?;
        let ok = is_correct(ex.kind, &emitted, &ex.answer_tokens);
        if ok {
            correct += 1;
        }
        per_example.push(ExampleResult {
            index: ex.index,
            emitted,
            gold: ex.answer_tokens.clone(),
            correct: ok,
        });
    }
    let task = match examples.first() {
        Some(first) if examples.iter().all(|e| e.kind == first.kind) => {
            first.kind.name().to_string()
        }
        Some(_) => "mixed".to_string(),
        None => "empty".to_string(),
    };
    let n = examples.len();
    Ok(EvalReport {
        task,
        policy: policy.name().to_string(),
        drop_latents,
        n,
        correct,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_example,
    })
}

/// Decode every example under the given eval-time mask policy. MCQ tasks are
/// scored by top-1 selection over their option letters at the answer
/// position; counting decodes greedily over the full vocabulary and requires
/// an exact digit-string match.
pub fn evaluate(
    model: &Model,
    examples: &[TaskExample],
    policy: MaskPolicy,
    drop_latents: bool,
    image_twice: bool,
) -> Result<EvalReport> {
    evaluate_with(
        examples,
        |ex| {
            let img = ex.image.to_tensor();
            let images: Vec<&Tensor> =
                if image_twice { vec![&img, &img] } else { vec![&img] };
            match ex.kind.n_options() {
                Some(n) => {
                    let choice =
                        model.choose_option(&images, &ex.prompt_tokens, n, policy, drop_latents)?;
                    Ok(vec![model.vocab.letter(choice)])
                }
                None => model.generate(
                    &images,
                    &ex.prompt_tokens,
                    policy,
                    drop_latents,
                    max_new_for(ex.kind),
                ),
            }
        },
        policy,
        drop_latents,
    )
}

/// One line of an attention dump: a per-example header with the layout and
/// capture dimensions, followed by the captured weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttentionDumpLine {
    Header {
        example: u64,
        layout: SequenceLayout,
        layers: usize,
        heads: usize,
    },
    Weight {
        example: u64,
        layer: usize,
        head: usize,
        query: usize,
        key: usize,
        weight: f64,
    },
}

/// Teacher-forced forward passes with attention capture; keeps every weight
/// whose query lies in the answer or latent span.
pub fn collect_attention(
    model: &Model,
    examples: &[TaskExample],
    policy: MaskPolicy,
) -> Result<Vec<AttentionDumpLine>> {
    let mut lines = Vec::new();
    for ex in examples {
        let img = ex.image.to_tensor();
        let n_img = (img.shape()[0] / model.config.patch_size)
            * (img.shape()[1] / model.config.patch_size);
        let (tokens, layout) = model.assemble(n_img, &ex.prompt_tokens, &ex.answer_tokens);
        let positions = layout.position_ids(false);
        let mask = build_mask(policy, &layout)?;
        let fp = model.forward_eval(
            &[&img],
            &tokens,
            &positions,
            &mask,
            CaptureOptions { attention: true, hidden: false },
        )?;
        let attn = fp.attention.expect("attention capture requested");
        lines.push(AttentionDumpLine::Header {
            example: ex.index,
            layout: layout.clone(),
            layers: attn.len(),
            heads: attn.first().map_or(0, Vec::len),
        });
        for (l, heads) in attn.iter().enumerate() {
            for (h, t) in heads.iter().enumerate() {
                let n = t.cols();
                for q in layout.answer_span.clone().chain(layout.latent_span.clone()) {
                    for k in 0..n {
                        let w = t.data()[q * n + k];
                        if w != 0.0 {
                            lines.push(AttentionDumpLine::Weight {
                                example: ex.index,
                                layer: l,
                                head: h,
                                query: q,
                                key: k,
                                weight: w,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(lines)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    /// Mean over examples, layers, heads, and answer-span query rows of the
    /// total attention mass placed on the latent span.
    pub mean_answer_to_latent: f64,
    /// Same statistic broken out per [layer][head].
    pub per_layer_head: Vec<Vec<f64>>,
    pub n_examples: usize,
}

/// Summarize answer→latent attention from a dump. The same code path serves
/// the live probe and the reloaded-dump recomputation, so the two agree
/// bitwise.
pub fn summarize_attention(lines: &[AttentionDumpLine]) -> Result<AttentionSummary> {
    let mut layers = 0;
    let mut heads = 0;
    // (example, layout) in encounter order.
    let mut layouts: Vec<(u64, SequenceLayout)> = Vec::new();
    for line in lines {
        if let AttentionDumpLine::Header { example, layout, layers: l, heads: h } = line {
            layers = layers.max(*l);
            heads = heads.max(*h);
            layouts.push((*example, layout.clone()));
        }
    }
    if layouts.is_empty() {
        return Err(Error::Data("attention dump has no headers".into()));
    }
    // mass[example_slot][layer][head][row-within-answer-span]
    let mut total = 0.0;
    let mut count = 0usize;
    let mut per_lh_sum = vec![vec![0.0; heads]; layers];
    let mut per_lh_count = vec![vec![0usize; heads]; layers];
    for (example, layout) in &layouts {
        if layout.k() == 0 {
            return Err(Error::Data("answer→latent probe requires K ≥ 1".into()));
        }
        let span = layout.answer_span.clone();
        for l in 0..layers {
            for h in 0..heads {
                for q in span.clone() {
                    let mut mass = 0.0;
                    for line in lines {
                        if let AttentionDumpLine::Weight {
                            example: e,
                            layer,
                            head,
                            query,
                            key,
                            weight,
                        } = line
                        {
                            if e == example
                                && *layer == l
                                && *head == h
                                && *query == q
                                && layout.latent_span.contains(key)
                            {
                                mass += weight;
                            }
                        }
                    }
                    total += mass;
                    count += 1;
                    per_lh_sum[l][h] += mass;
                    per_lh_count[l][h] += 1;
                }
            }
        }
    }
    let per_layer_head = per_lh_sum
        .iter()
        .zip(&per_lh_count)
        .map(|(sums, counts)| {
            sums.iter()
                .zip(counts)
                .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
                .collect()
        })
        .collect();
    Ok(AttentionSummary {
        mean_answer_to_latent: total / count as f64,
        per_layer_head,
        n_examples: layouts.len(),
    })
}

/// Mean attention from answer tokens to latent tokens, averaged over layers,
/// heads, answer positions, and examples.
pub fn answer_to_latent_attention(
    model: &Model,
    examples: &[TaskExample],
    policy: MaskPolicy,
) -> Result<AttentionSummary> {
    if model.config.latent.k == 0 {
        return Err(Error::Config("answer→latent probe requires K ≥ 1".into()));
    }
    let lines = collect_attention(model, examples, policy)?;
    summarize_attention(&lines)
}

pub fn write_attention_dump(path: &Path, lines: &[AttentionDumpLine]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_attention_dump(path: &Path) -> Result<Vec<AttentionDumpLine>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for l in r.lines() {
        let l = l?;
        if !l.trim().is_empty() {
            lines.push(serde_json::from_str(&l)?);
        }
    }
    Ok(lines)
}

/// Per-latent attention heat grids over the patch grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentImageMaps {
    pub example: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// One grid per latent position, averaged over layers and heads;
    /// row-major grid_h × grid_w.
    pub maps: Vec<Vec<f64>>,
    /// Source raster for offline overlay plotting.
    pub raster_h: usize,
    pub raster_w: usize,
    pub raster: Vec<f64>,
}

pub fn latent_image_attention_maps(
    model: &Model,
    ex: &TaskExample,
    policy: MaskPolicy,
) -> Result<LatentImageMaps> {
    if model.config.latent.k == 0 {
        return Err(Error::Config("latent→image maps require K ≥ 1".into()));
    }
    let img = ex.image.to_tensor();
    let p = model.config.patch_size;
    let (gh, gw) = (img.shape()[0] / p, img.shape()[1] / p);
    let n_img = gh * gw;
    let (tokens, layout) = model.assemble(n_img, &ex.prompt_tokens, &ex.answer_tokens);
    let positions = layout.position_ids(false);
    let mask = build_mask(policy, &layout)?;
    let fp = model.forward_eval(
        &[&img],
        &tokens,
        &positions,
        &mask,
        CaptureOptions { attention: true, hidden: false },
    )?;
    let attn = fp.attention.expect("attention capture requested");
    let n_lh = (attn.len() * attn[0].len()) as f64;
    let mut maps = Vec::with_capacity(layout.k());
    for latent_pos in layout.latent_span.clone() {
        let mut grid = vec![0.0; n_img];
        for heads in &attn {
            for t in heads {
                let n = t.cols();
                for (slot, g) in grid.iter_mut().enumerate() {
                    let key = layout.image_span.start + slot;
                    *g += t.data()[latent_pos * n + key] / n_lh;
                }
            }
        }
        maps.push(grid);
    }
    Ok(LatentImageMaps {
        example: ex.index,
        grid_h: gh,
        grid_w: gw,
        maps,
        raster_h: ex.image.h,
        raster_w: ex.image.w,
        raster: ex.image.data.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HiddenRow {
    pub task: String,
    pub example: u64,
    pub position: usize,
    /// One of "latent", "image", "text".
    pub span: String,
    pub vector: Vec<f64>,
}

/// Final-layer hidden states for the first `n` examples, labeled by span
/// type.
pub fn export_hidden_states(
    model: &Model,
    examples: &[TaskExample],
    n: usize,
    policy: MaskPolicy,
) -> Result<Vec<HiddenRow>> {
    let mut rows = Vec::new();
    for ex in examples.iter().take(n) {
        let img = ex.image.to_tensor();
        let n_img = (img.shape()[0] / model.config.patch_size)
            * (img.shape()[1] / model.config.patch_size);
        let (tokens, layout) = model.assemble(n_img, &ex.prompt_tokens, &ex.answer_tokens);
        let positions = layout.position_ids(false);
        let mask = build_mask(policy, &layout)?;
        let fp = model.forward_eval(
            &[&img],
            &tokens,
            &positions,
            &mask,
            CaptureOptions { attention: false, hidden: true },
        )?;
        let hidden = fp.hidden.expect("hidden capture requested");
        for pos in 0..layout.total_len {
            let span = match layout.span_of(pos) {
                crate::layout::SpanKind::Image => "image",
                crate::layout::SpanKind::Latent => "latent",
                _ => "text",
            };
            rows.push(HiddenRow {
                task: ex.kind.name().to_string(),
                example: ex.index,
                position: pos,
                span: span.to_string(),
                vector: hidden.row(pos).to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Flat columnar text: task, example, position, span, then one column per
/// hidden dimension.
pub fn write_hidden_tsv(path: &Path, rows: &[HiddenRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut header = String::from("task\texample\tposition\tspan");
    for i in 0..d {
        header.push_str(&format!("\th{i}"));
    }
    writeln!(w, "{header}")?;
    for r in rows {
        let mut line = format!("{}\t{}\t{}\t{}", r.task, r.example, r.position, r.span);
        for v in &r.vector {
            line.push_str(&format!("\t{v}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::gen_example;
    use crate::vocab::Vocabulary;

    fn examples(n: u64) -> Vec<TaskExample> {
        let vocab = Vocabulary::default_with_latents(0);
        (0..n)
            .map(|i| gen_example(TaskKind::Localization, 77, i, &vocab).unwrap())
            .collect()
    }

    #[test]
    fn perfect_oracle_scores_one() {
        let exs = examples(20);
        let report = evaluate_with(
            &exs,
            |ex| Ok(ex.answer_tokens.clone()),
            MaskPolicy::Standard,
            false,
        )
        .unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.correct, 20);
    }

    #[test]
    fn always_wrong_oracle_scores_zero() {
        let vocab = Vocabulary::default_with_latents(0);
        let exs = examples(10);
        let report = evaluate_with(
            &exs,
            |ex| {
                let gold = ex.answer_tokens[0];
                let a = vocab.letter(0);
                let b = vocab.letter(1);
                Ok(vec![if gold == a { b } else { a }])
            },
            MaskPolicy::Standard,
            false,
        )
        .unwrap();
        assert_eq!(report.accuracy, 0.0);
    }

    #[test]
    fn counting_requires_exact_digit_string() {
        let vocab = Vocabulary::default_with_latents(0);
        let gold = vocab.encode_count_answer(10);
        assert!(is_correct(TaskKind::Counting, &gold, &gold));
        let wrong = vocab.encode_count_answer(7);
        assert!(!is_correct(TaskKind::Counting, &wrong, &gold));
        // Truncated emission (no EOS) does not count.
        assert!(!is_correct(TaskKind::Counting, &gold[..2].to_vec(), &gold));
    }
}
