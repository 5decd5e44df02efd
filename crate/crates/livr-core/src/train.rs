//! Answer-only NLL training with the two-stage protocol and baselines.
//!
//! Loss is the mean negative log-likelihood of the answer tokens: each
//! answer position contributes −log P of its token, read from the logits at
//! the preceding position; nothing outside the answer span contributes.
//! AdamW with decoupled weight decay drives the trainable parameters under a
//! per-stage schedule of 5% linear warmup followed by cosine decay, with
//! gradient accumulation before each update. Stage 1 trains under the
//! bottleneck mask, Stage 2 under the standard mask; optimizer state and the
//! schedule restart at the stage boundary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diag;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layout::SequenceLayout;
use crate::mask::{build_mask, MaskPolicy};
use crate::model::{CaptureOptions, Model, Params};
use crate::rng::substream;
use crate::taskgen::TaskExample;
use crate::tensor::Tensor;

/// Mean NLL over the answer span. `targets[t]` is the token at position `t`
/// of the full sequence; the loss for an answer position is computed from
/// the logits row immediately before it, and perturbing any target outside
/// the answer span cannot change the result.
pub fn answer_nll(
    graph: &mut Graph,
    logits: NodeId,
    targets: &[usize],
    layout: &SequenceLayout,
) -> Result<NodeId> {
    let span = &layout.answer_span;
    if span.is_empty() {
        return Err(Error::Config("answer_nll: empty answer span".into()));
    }
    if span.start == 0 {
        return Err(Error::Config("answer_nll: answer span starts at position 0".into()));
    }
    if targets.len() != layout.total_len {
        return Err(Error::ShapeMismatch(format!(
            "answer_nll: {} targets for layout of {}",
            targets.len(),
            layout.total_len
        )));
    }
    let rows = graph.slice_rows(logits, span.start - 1, span.end - 1)?;
    graph.cross_entropy(rows, &targets[span.start..span.end])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-device batch (examples per micro-step).
    pub batch: usize,
    /// Gradient-accumulation steps per optimizer update.
    pub accum: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 1,
            accum: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch * self.accum
    }
}

/// AdamW with decoupled weight decay and bias correction. Decay is applied
/// to the parameter first, then the bias-corrected moment step.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: std::collections::BTreeMap<String, Vec<f64>>,
    v: std::collections::BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> AdamW {
        AdamW { cfg, m: Default::default(), v: Default::default(), t: 0 }
    }

    /// One update over `grads` (already averaged over the effective batch)
    /// at learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &std::collections::BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (path, g) in grads {
            let p = params.get_mut(path).expect("gradient for unknown parameter");
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let data = p.data_mut();
            for i in 0..g.len() {
                data[i] -= lr * self.cfg.weight_decay * data[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Per-stage learning-rate schedule: linear warmup over the first 5% of
/// updates (rounded up), then cosine decay to zero at the stage end.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_updates: usize,
    pub warmup_updates: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_updates: usize) -> LrSchedule {
        let warmup = ((total_updates as f64) * 0.05).ceil() as usize;
        LrSchedule { peak, total_updates, warmup_updates: warmup.max(1).min(total_updates) }
    }

    pub fn lr_at(&self, update: usize) -> f64 {
        if self.total_updates == 0 {
            return 0.0;
        }
        if update < self.warmup_updates {
            return self.peak * (update + 1) as f64 / self.warmup_updates as f64;
        }
        let span = (self.total_updates - self.warmup_updates) as f64;
        if span == 0.0 {
            return self.peak;
        }
        let progress = (update - self.warmup_updates) as f64 / span;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule { stage1_epochs: 4, stage2_epochs: 6 }
    }
}

impl StageSchedule {
    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    BestValidation,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr_last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub selection: SelectionRule,
    pub selected_stage: usize,
    pub selected_epoch: usize,
    pub selected_val_accuracy: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
    /// Measured, not part of the deterministic record; excluded from
    /// serialization so identical runs produce identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Line-delimited: one record per epoch, then the summary.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        #[derive(Serialize)]
        struct SummaryLine<'a> {
            summary: &'a RunSummary,
        }
        serde_json::to_writer(&mut w, &SummaryLine { summary: &self.summary })?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<RunRecord> {
        #[derive(Deserialize)]
        struct SummaryLine {
            summary: RunSummary,
        }
        let r = BufReader::new(File::open(path)?);
        let mut epochs = Vec::new();
        let mut summary = None;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if line.starts_with("{\"summary\"") {
                let s: SummaryLine = serde_json::from_str(&line)?;
                summary = Some(s.summary);
            } else {
                epochs.push(serde_json::from_str(&line)?);
            }
        }
        Ok(RunRecord {
            epochs,
            summary: summary.ok_or_else(|| Error::Data("run record has no summary".into()))?,
            wall_clock_secs: 0.0,
        })
    }
}

/// Options threaded through training and validation.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Duplicate the image span at training and inference (the image-twice
    /// control).
    pub image_twice: bool,
}

/// Forward + answer-NLL for one example; returns the graph and loss node.
pub fn example_loss<R: Rng>(
    model: &Model,
    ex: &TaskExample,
    policy: MaskPolicy,
    opts: TrainOptions,
    dropout: Option<&mut R>,
) -> Result<(Graph, NodeId)> {
    let img = ex.image.to_tensor();
    let per_image = (img.shape()[0] / model.config.patch_size)
        * (img.shape()[1] / model.config.patch_size);
    let images: Vec<&Tensor> = if opts.image_twice { vec![&img, &img] } else { vec![&img] };
    let n_img = per_image * images.len();
    let (tokens, layout) = model.assemble(n_img, &ex.prompt_tokens, &ex.answer_tokens);
    let positions = layout.position_ids(false);
    let mask = build_mask(policy, &layout)?;
    let fp = model.forward(
        &images,
        &tokens,
        &positions,
        &mask,
        CaptureOptions::default(),
        false,
        dropout,
    )?;
    let mut targets = vec![model.vocab.pad(); layout.total_len];
    for (j, &tok) in tokens.iter().enumerate() {
        targets[n_img + j] = tok;
    }
    let mut graph = fp.graph;
    let loss = answer_nll(&mut graph, fp.logits, &targets, &layout)?;
    Ok((graph, loss))
}

/// Train for `epochs` epochs under one mask policy, appending one record per
/// epoch. Validation accuracy is measured under the standard policy after
/// every epoch so checkpoint selection is comparable across stages and
/// baselines. `on_epoch` fires after each epoch with the fresh record.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut Model,
    train_data: &[TaskExample],
    policy: MaskPolicy,
    epochs: usize,
    opt_cfg: &OptimizerConfig,
    seed: u64,
    stage_id: usize,
    val_data: &[TaskExample],
    opts: TrainOptions,
    record: &mut Vec<EpochRecord>,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord, &Model)>,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if train_data.is_empty() {
        return Err(Error::Config("train_stage: empty dataset".into()));
    }
    let trainability = model.trainability();
    let updates_per_epoch = train_data.len().div_ceil(opt_cfg.effective_batch());
    let schedule = LrSchedule::new(opt_cfg.lr, epochs * updates_per_epoch);
    let mut optimizer = AdamW::new(*opt_cfg);
    let mut update_idx = 0usize;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut shuffle_rng = substream(seed, &format!("shuffle/stage{stage_id}"), epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut dropout_rng = substream(seed, &format!("dropout/stage{stage_id}"), epoch as u64);

        let mut epoch_loss = 0.0;
        let mut accum: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        let mut accum_examples = 0usize;
        let mut lr_last = 0.0;

        for (step, &idx) in order.iter().enumerate() {
            let ex = &train_data[idx];
            let (mut graph, loss) =
                example_loss(model, ex, policy, opts, Some(&mut dropout_rng))?;
            let loss_val = graph.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "stage {stage_id} epoch {epoch} step {step}: non-finite loss"
                )));
            }
            epoch_loss += loss_val;
            let grads = graph.backward(loss)?;
            for (path, g) in &grads {
                if !trainability.is_trainable(path) {
                    continue;
                }
                let buf = accum.entry(path.clone()).or_insert_with(|| vec![0.0; g.numel()]);
                for (b, &gv) in buf.iter_mut().zip(g.data()) {
                    *b += gv;
                }
            }
            accum_examples += 1;

            if accum_examples == opt_cfg.effective_batch() || step + 1 == order.len() {
                let inv = 1.0 / accum_examples as f64;
                for g in accum.values_mut() {
                    for v in g.iter_mut() {
                        *v *= inv;
                    }
                }
                lr_last = schedule.lr_at(update_idx);
                optimizer.step(&mut model.params, &accum, lr_last);
                update_idx += 1;
                accum.clear();
                accum_examples = 0;
            }
        }

        let val = diag::evaluate(model, val_data, MaskPolicy::Standard, false, opts.image_twice)?;
        let rec = EpochRecord {
            stage: stage_id,
            epoch: epoch + 1,
            train_loss: epoch_loss / train_data.len() as f64,
            val_accuracy: val.accuracy,
            lr_last,
        };
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(&rec, model);
        }
        record.push(rec);
    }
    Ok(())
}

/// Outcome of a full run: the record plus the parameters selected by the
/// checkpoint rule (the model itself is left in its final state).
pub struct RunOutcome {
    pub record: RunRecord,
    pub selected_params: Params,
}

/// Shared stage driver with epoch-granular best-validation snapshots.
#[allow(clippy::too_many_arguments)]
fn run_stages(
    model: &mut Model,
    train_data: &[TaskExample],
    val_data: &[TaskExample],
    stages: &[(usize, MaskPolicy, usize)],
    opt_cfg: &OptimizerConfig,
    seed: u64,
    selection: SelectionRule,
    opts: TrainOptions,
    method: &str,
    config_hash: &str,
) -> Result<RunOutcome> {
    let start = std::time::Instant::now();
    let mut epochs_log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, usize, Params)> = None;

    for &(stage_id, policy, epochs) in stages {
        let mut hook = |rec: &EpochRecord, m: &Model| {
            if selection == SelectionRule::BestValidation {
                let better = best.as_ref().is_none_or(|(acc, _, _, _)| rec.val_accuracy > *acc);
                if better {
                    best = Some((rec.val_accuracy, rec.stage, rec.epoch, m.params.clone()));
                }
            }
        };
        train_stage(
            model,
            train_data,
            policy,
            epochs,
            opt_cfg,
            seed,
            stage_id,
            val_data,
            opts,
            &mut epochs_log,
            Some(&mut hook),
        )?;
    }

    let (selected_params, sel_stage, sel_epoch, sel_acc) = match (selection, best) {
        (SelectionRule::BestValidation, Some((acc, stage, epoch, params))) => {
            (params, stage, epoch, acc)
        }
        _ => {
            let last = epochs_log.last();
            (
                model.params.clone(),
                last.map_or(0, |r| r.stage),
                last.map_or(0, |r| r.epoch),
                last.map_or(0.0, |r| r.val_accuracy),
            )
        }
    };

    Ok(RunOutcome {
        record: RunRecord {
            epochs: epochs_log,
            summary: RunSummary {
                method: method.to_string(),
                selection,
                selected_stage: sel_stage,
                selected_epoch: sel_epoch,
                selected_val_accuracy: sel_acc,
                config_hash: config_hash.to_string(),
            },
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        selected_params,
    })
}

/// The two-stage protocol: Stage 1 under the bottleneck mask, Stage 2 under
/// the standard mask, each with a fresh optimizer and its own warmup+cosine
/// schedule. A (0, N) schedule degenerates to the latents-only baseline.
#[allow(clippy::too_many_arguments)]
pub fn run_livr(
    model: &mut Model,
    train_data: &[TaskExample],
    val_data: &[TaskExample],
    schedule: &StageSchedule,
    opt_cfg: &OptimizerConfig,
    seed: u64,
    selection: SelectionRule,
    config_hash: &str,
) -> Result<RunOutcome> {
    let stages = [
        (1usize, MaskPolicy::Bottleneck, schedule.stage1_epochs),
        (2usize, MaskPolicy::Standard, schedule.stage2_epochs),
    ];
    run_stages(
        model,
        train_data,
        val_data,
        &stages,
        opt_cfg,
        seed,
        selection,
        TrainOptions::default(),
        "livr",
        config_hash,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    DirectSft,
    LatentsOnly,
    MaskOnly,
    ImageTwice,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::DirectSft => "direct_sft",
            BaselineKind::LatentsOnly => "latents_only",
            BaselineKind::MaskOnly => "mask_only",
            BaselineKind::ImageTwice => "image_twice",
        }
    }

    pub fn parse(s: &str) -> Result<BaselineKind> {
        match s {
            "direct_sft" => Ok(BaselineKind::DirectSft),
            "latents_only" => Ok(BaselineKind::LatentsOnly),
            "mask_only" => Ok(BaselineKind::MaskOnly),
            "image_twice" => Ok(BaselineKind::ImageTwice),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

/// One-stage baselines, trained for the same total epochs as the two-stage
/// run they are compared against.
///
/// latents-only runs the literal (0, N) schedule, so its outputs are
/// identical to `run_livr` with stage1_epochs = 0 under the same seed.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline(
    kind: BaselineKind,
    model: &mut Model,
    train_data: &[TaskExample],
    val_data: &[TaskExample],
    total_epochs: usize,
    opt_cfg: &OptimizerConfig,
    seed: u64,
    selection: SelectionRule,
    config_hash: &str,
) -> Result<RunOutcome> {
    let k = model.config.latent.k;
    let (stages, opts): (Vec<(usize, MaskPolicy, usize)>, TrainOptions) = match kind {
        BaselineKind::LatentsOnly => {
            if k == 0 {
                return Err(Error::Config("latents_only requires K ≥ 1".into()));
            }
            (
                vec![
                    (1, MaskPolicy::Bottleneck, 0),
                    (2, MaskPolicy::Standard, total_epochs),
                ],
                TrainOptions::default(),
            )
        }
        BaselineKind::DirectSft => {
            if k != 0 {
                return Err(Error::Config("direct_sft requires K = 0".into()));
            }
            (vec![(1, MaskPolicy::Standard, total_epochs)], TrainOptions::default())
        }
        BaselineKind::MaskOnly => {
            if k != 0 {
                return Err(Error::Config("mask_only requires K = 0".into()));
            }
            (vec![(1, MaskPolicy::Bottleneck, total_epochs)], TrainOptions::default())
        }
        BaselineKind::ImageTwice => {
            if k != 0 {
                return Err(Error::Config("image_twice requires K = 0".into()));
            }
            (
                vec![(1, MaskPolicy::Standard, total_epochs)],
                TrainOptions { image_twice: true },
            )
        }
    };
    run_stages(
        model,
        train_data,
        val_data,
        &stages,
        opt_cfg,
        seed,
        selection,
        opts,
        kind.name(),
        config_hash,
    )
}
