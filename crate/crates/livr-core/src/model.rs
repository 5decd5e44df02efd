//! Toy multimodal decoder.
//!
//! A frozen per-patch linear embedder stands in for the vision encoder and
//! projector; a token embedding table with a separately stored latent block
//! feeds N pre-norm transformer blocks carrying low-rank adapters on the
//! attention and MLP projections; a frozen linear head produces logits over
//! the base vocabulary. Latent tokens are inserted by the sequence layout
//! and are never generated, so the head deliberately has no latent columns.
//!
//! Only the adapter matrices and (optionally) the latent embedding rows are
//! trainable; everything else stays bitwise at its initialization.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layout::{build_layout, LatentConfig, LatentEmbeddings, SequenceLayout};
use crate::linalg;
use crate::mask::{build_mask, AttentionMask, MaskPolicy};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub type Params = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraTargets {
    pub attention: bool,
    pub mlp: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets { attention: true, mlp: true }
    }
}

/// Low-rank adapter configuration. The effective weight delta of a target
/// projection is (alpha / rank) · A·B with A: [d_in × rank], B: [rank × d_out];
/// A is gaussian, B starts at zero so adapted and base forward coincide at
/// initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    #[serde(default)]
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 8.0, dropout: 0.05, targets: LoraTargets::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub max_seq_len: usize,
    pub latent: LatentConfig,
    pub lora: LoraConfig,
    /// Train the whole language backbone instead of adapters (the patch
    /// embedder stays frozen either way).
    #[serde(default)]
    pub full_finetune: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4,
            image_h: 32,
            image_w: 32,
            channels: 1,
            patch_size: 8,
            max_seq_len: 96,
            latent: LatentConfig::default(),
            lora: LoraConfig::default(),
            full_finetune: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.channels != 1 {
            return Err(Error::Config("only single-channel rasters are supported".into()));
        }
        if self.latent.k > 0 && self.lora.rank == 0 && !self.full_finetune && !self.latent.rows_trainable
        {
            return Err(Error::Config("nothing is trainable under this configuration".into()));
        }
        Ok(())
    }

    /// Image tokens for the configured raster size.
    pub fn n_image_tokens(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// The set of parameter paths that receive optimizer updates. Everything
/// outside the map must remain bitwise unchanged by training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainabilityMap {
    trainable: BTreeSet<String>,
}

impl TrainabilityMap {
    pub fn for_config(cfg: &ModelConfig) -> TrainabilityMap {
        let mut trainable = BTreeSet::new();
        if cfg.full_finetune {
            for path in param_paths(cfg) {
                if path != "patch.w" {
                    trainable.insert(path);
                }
            }
        } else {
            if cfg.lora.rank > 0 {
                for (path, _, _) in lora_target_dims(cfg) {
                    trainable.insert(format!("{path}.lora_a"));
                    trainable.insert(format!("{path}.lora_b"));
                }
            }
            if cfg.latent.k > 0 && cfg.latent.rows_trainable {
                trainable.insert("embed.latent".to_string());
            }
        }
        TrainabilityMap { trainable }
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.trainable.contains(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.trainable.iter()
    }

    pub fn frozen_paths<'a>(&'a self, params: &'a Params) -> impl Iterator<Item = &'a String> {
        params.keys().filter(move |p| !self.trainable.contains(*p))
    }

    /// Total trainable scalars under `params`.
    pub fn count(&self, params: &Params) -> usize {
        self.trainable
            .iter()
            .filter_map(|p| params.get(p))
            .map(Tensor::numel)
            .sum()
    }
}

/// LoRA target projections with their (d_in, d_out).
fn lora_target_dims(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let hidden = d * cfg.mlp_ratio;
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        if cfg.lora.targets.attention {
            for proj in ["wq", "wk", "wv", "wo"] {
                out.push((format!("blocks.{l}.attn.{proj}"), d, d));
            }
        }
        if cfg.lora.targets.mlp {
            out.push((format!("blocks.{l}.mlp.fc1"), d, hidden));
            out.push((format!("blocks.{l}.mlp.fc2"), hidden, d));
        }
    }
    out
}

fn param_paths(cfg: &ModelConfig) -> Vec<String> {
    let mut paths = vec![
        "patch.w".to_string(),
        "embed.base".to_string(),
        "embed.latent".to_string(),
        "head.w".to_string(),
        "ln_f.gamma".to_string(),
        "ln_f.beta".to_string(),
    ];
    for l in 0..cfg.n_layers {
        for p in ["ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"] {
            paths.push(format!("blocks.{l}.{p}"));
        }
        for p in ["wq", "wk", "wv", "wo"] {
            paths.push(format!("blocks.{l}.attn.{p}"));
        }
        paths.push(format!("blocks.{l}.mlp.fc1"));
        paths.push(format!("blocks.{l}.mlp.fc2"));
    }
    if cfg.lora.rank > 0 {
        for (path, _, _) in lora_target_dims(cfg) {
            paths.push(format!("{path}.lora_a"));
            paths.push(format!("{path}.lora_b"));
        }
    }
    paths
}

const LN_EPS: f64 = 1e-5;
/// Blocked attention logits are set to this finite value instead of -inf;
/// after max-subtraction the softmax underflows them to exactly zero without
/// risking NaN.
pub const MASK_FILL: f64 = -1e30;

#[derive(Clone, Copy, Debug, Default)]
pub struct CaptureOptions {
    pub attention: bool,
    pub hidden: bool,
}

/// One forward pass: the graph (for backward), the logits node, the image
/// embedding leaf (for gradient audits), and optional captures.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: NodeId,
    pub image_leaf: NodeId,
    /// Post-softmax attention weights, [layer][head], each [S × S].
    pub attention: Option<Vec<Vec<Tensor>>>,
    /// Final-layer hidden states [S × d_model] (input to the logit head).
    pub hidden: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Params,
    posenc: Tensor,
}

fn gaussian(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

fn sinusoid_table(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = (pos as f64 * freq).sin();
            data[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Tensor::new(vec![max_len, d], data).unwrap()
}

/// Deterministic initialization: every tensor draws from its own named
/// substream, so parameter values depend only on (config, seed), not on
/// initialization order.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let vocab = Vocabulary::default_with_latents(config.latent.k);
    let d = config.d_model;
    let hidden = d * config.mlp_ratio;
    let trainability = TrainabilityMap::for_config(config);

    let mut params = Params::new();
    let mut insert = |path: &str, t: Tensor| {
        params.insert(path.to_string(), t);
    };

    let draw = |path: &str, shape: Vec<usize>, std: f64| -> Tensor {
        let mut rng = substream(seed, path, 0);
        gaussian(&mut rng, shape, std)
    };

    insert("patch.w", draw("patch.w", vec![config.patch_dim(), d], 0.25));
    insert("embed.base", draw("embed.base", vec![vocab.base_size(), d], 1.0));
    // Latent rows use the same scheme as the base embeddings.
    insert(
        "embed.latent",
        draw("embed.latent", vec![config.latent.embedding_rows(), d], 1.0),
    );
    insert("head.w", draw("head.w", vec![d, vocab.base_size()], 1.0 / (d as f64).sqrt()));
    insert("ln_f.gamma", Tensor::new(vec![d], vec![1.0; d])?);
    insert("ln_f.beta", Tensor::zeros(vec![d]));

    for l in 0..config.n_layers {
        for p in ["ln1", "ln2"] {
            insert(&format!("blocks.{l}.{p}.gamma"), Tensor::new(vec![d], vec![1.0; d])?);
            insert(&format!("blocks.{l}.{p}.beta"), Tensor::zeros(vec![d]));
        }
        let wstd = 1.0 / (d as f64).sqrt();
        for p in ["wq", "wk", "wv", "wo"] {
            let path = format!("blocks.{l}.attn.{p}");
            insert(&path, draw(&path, vec![d, d], wstd));
        }
        insert(
            &format!("blocks.{l}.mlp.fc1"),
            draw(&format!("blocks.{l}.mlp.fc1"), vec![d, hidden], wstd),
        );
        insert(
            &format!("blocks.{l}.mlp.fc2"),
            draw(&format!("blocks.{l}.mlp.fc2"), vec![hidden, d], 1.0 / (hidden as f64).sqrt()),
        );
    }
    if config.lora.rank > 0 {
        for (path, d_in, d_out) in lora_target_dims(config) {
            let a_path = format!("{path}.lora_a");
            insert(&a_path, draw(&a_path, vec![d_in, config.lora.rank], 1.0 / (d_in as f64).sqrt()));
            insert(&format!("{path}.lora_b"), Tensor::zeros(vec![config.lora.rank, d_out]));
        }
    }

    for (path, tensor) in params.iter_mut() {
        tensor.requires_grad = trainability.is_trainable(path);
    }

    let posenc = sinusoid_table(config.max_seq_len, d);
    Ok(Model { config: config.clone(), vocab, params, posenc })
}

impl Model {
    pub fn trainability(&self) -> TrainabilityMap {
        TrainabilityMap::for_config(&self.config)
    }

    /// Patch-embed a raster into [n_patches × d_model] rows (frozen path,
    /// computed outside the graph).
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let p = self.config.patch_size;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if image.shape().len() != 2 || h % p != 0 || w % p != 0 {
            return Err(Error::ShapeMismatch(format!(
                "raster {:?} incompatible with patch size {p}",
                image.shape()
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let n_patches = gh * gw;
        let mut patches = vec![0.0; n_patches * p * p];
        let src = image.data();
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                for py in 0..p {
                    for px in 0..p {
                        patches[row * p * p + py * p + px] = src[(gy * p + py) * w + gx * p + px];
                    }
                }
            }
        }
        let w_patch = &self.params["patch.w"];
        let out = linalg::matmul_nn(
            &patches,
            w_patch.data(),
            n_patches,
            p * p,
            self.config.d_model,
        );
        Tensor::new(vec![n_patches, self.config.d_model], out)
    }

    /// Assemble the token sequence and canonical layout for a training or
    /// evaluation example. The answer span opens with the `<ans>` cue token
    /// (the generation scaffold), followed by the gold answer tokens.
    pub fn assemble(
        &self,
        n_image_tokens: usize,
        prompt: &[usize],
        answer: &[usize],
    ) -> (Vec<usize>, SequenceLayout) {
        let k = self.config.latent.k;
        let latents: Vec<usize> = self.vocab.latent_ids().collect();
        let mut tokens = Vec::with_capacity(prompt.len() + k + 1 + answer.len());
        match self.config.latent.placement {
            crate::layout::LatentPlacement::AfterPrompt => {
                tokens.extend_from_slice(prompt);
                tokens.extend_from_slice(&latents);
            }
            crate::layout::LatentPlacement::BeforePrompt => {
                tokens.extend_from_slice(&latents);
                tokens.extend_from_slice(prompt);
            }
        }
        tokens.push(self.vocab.ans());
        tokens.extend_from_slice(answer);
        let layout = build_layout(
            n_image_tokens,
            prompt.len(),
            k,
            self.config.latent.placement,
            1 + answer.len(),
        );
        (tokens, layout)
    }

    /// Remove latent ids from an assembled token list (positions follow the
    /// canonical layout via `SequenceLayout::position_ids`).
    pub fn drop_latent_tokens(&self, tokens: &[usize], layout: &SequenceLayout) -> Vec<usize> {
        let n_img = layout.image_span.len();
        tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| !layout.latent_span.contains(&(i + n_img)))
            .map(|(_, &t)| t)
            .collect()
    }

    fn gather_positions(&self, positions: &[usize]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            if p >= self.config.max_seq_len {
                return Err(Error::Config(format!(
                    "position {p} exceeds max_seq_len {}",
                    self.config.max_seq_len
                )));
            }
            data.extend_from_slice(self.posenc.row(p));
        }
        Tensor::new(vec![positions.len(), d], data)
    }

    fn lora_linear<R: Rng>(
        &self,
        g: &mut Graph,
        x: NodeId,
        path: &str,
        dropout: &mut Option<&mut R>,
    ) -> Result<NodeId> {
        let w = g.leaf(path, &self.params[path])?;
        let base = g.matmul(x, w)?;
        if self.config.lora.rank == 0 || self.config.full_finetune {
            return Ok(base);
        }
        let a_path = format!("{path}.lora_a");
        let b_path = format!("{path}.lora_b");
        let mut xin = x;
        let p = self.config.lora.dropout;
        if p > 0.0 {
            if let Some(rng) = dropout.as_deref_mut() {
                let shape = g.value(x).shape().to_vec();
                let n: usize = shape.iter().product();
                let keep = 1.0 - p;
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = g.input(Tensor::new(shape, mask)?);
                xin = g.mul(x, m)?;
            }
        }
        let a = g.leaf(&a_path, &self.params[&a_path])?;
        let b = g.leaf(&b_path, &self.params[&b_path])?;
        let t1 = g.matmul(xin, a)?;
        let t2 = g.matmul(t1, b)?;
        let delta = g.scale(t2, self.config.lora.alpha / self.config.lora.rank as f64)?;
        g.add(base, delta)
    }

    /// Full forward pass over one sequence.
    ///
    /// `images` are patch-embedded and concatenated ahead of `tokens` (one
    /// entry normally; two identical entries for the image-twice control).
    /// `positions` are canonical position ids covering image and token slots;
    /// `mask` must match the effective sequence length. Attention rows sum to
    /// one over their allowed keys and blocked entries are exactly zero.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        images: &[&Tensor],
        tokens: &[usize],
        positions: &[usize],
        mask: &AttentionMask,
        capture: CaptureOptions,
        image_grad: bool,
        mut dropout: Option<&mut R>,
    ) -> Result<ForwardPass> {
        let mut g = Graph::new();
        let d = self.config.d_model;

        let mut patch_rows: Vec<Tensor> = Vec::new();
        for img in images {
            patch_rows.push(self.patch_embed(img)?);
        }
        let n_img: usize = patch_rows.iter().map(Tensor::rows).sum();
        let total = n_img + tokens.len();
        if positions.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "{} positions for sequence of {total}",
                positions.len()
            )));
        }
        if mask.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} for sequence of {total}",
                mask.len()
            )));
        }

        let mut image_embed = Tensor::zeros(vec![n_img, d]);
        {
            let dst = image_embed.data_mut();
            let mut off = 0;
            for rows in &patch_rows {
                dst[off..off + rows.numel()].copy_from_slice(rows.data());
                off += rows.numel();
            }
        }
        image_embed.requires_grad = image_grad;
        let image_leaf = g.leaf("image_embed", &image_embed)?;

        let base = g.leaf("embed.base", &self.params["embed.base"])?;
        let latent = g.leaf("embed.latent", &self.params["embed.latent"])?;
        let shared = self.config.latent.embeddings == LatentEmbeddings::Shared;
        let tok_embed = g.embed(base, latent, tokens, self.vocab.base_size(), shared)?;

        let mut x = g.concat_rows(&[image_leaf, tok_embed])?;
        let pos = g.input(self.gather_positions(positions)?);
        x = g.add(x, pos)?;

        let blocked = mask.blocked_flat();
        let n_heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let mut attn_capture: Vec<Vec<Tensor>> = Vec::new();

        for l in 0..self.config.n_layers {
            let ln1_g = g.leaf(&format!("blocks.{l}.ln1.gamma"), &self.params[&format!("blocks.{l}.ln1.gamma")])?;
            let ln1_b = g.leaf(&format!("blocks.{l}.ln1.beta"), &self.params[&format!("blocks.{l}.ln1.beta")])?;
            let xn = g.layernorm(x, ln1_g, ln1_b, LN_EPS)?;

            let q = self.lora_linear(&mut g, xn, &format!("blocks.{l}.attn.wq"), &mut dropout)?;
            let k = self.lora_linear(&mut g, xn, &format!("blocks.{l}.attn.wk"), &mut dropout)?;
            let v = self.lora_linear(&mut g, xn, &format!("blocks.{l}.attn.wv"), &mut dropout)?;

            let mut head_outs = Vec::with_capacity(n_heads);
            let mut layer_attn = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let masked = g.masked_fill(scaled, &blocked, MASK_FILL)?;
                let attn = g.softmax(masked)?;
                if capture.attention {
                    layer_attn.push(g.value(attn).clone());
                }
                head_outs.push(g.matmul(attn, vh)?);
            }
            if capture.attention {
                attn_capture.push(layer_attn);
            }
            let ctx = g.concat_cols(&head_outs)?;
            let attn_out = self.lora_linear(&mut g, ctx, &format!("blocks.{l}.attn.wo"), &mut dropout)?;
            x = g.add(x, attn_out)?;

            let ln2_g = g.leaf(&format!("blocks.{l}.ln2.gamma"), &self.params[&format!("blocks.{l}.ln2.gamma")])?;
            let ln2_b = g.leaf(&format!("blocks.{l}.ln2.beta"), &self.params[&format!("blocks.{l}.ln2.beta")])?;
            let xn2 = g.layernorm(x, ln2_g, ln2_b, LN_EPS)?;
            let h1 = self.lora_linear(&mut g, xn2, &format!("blocks.{l}.mlp.fc1"), &mut dropout)?;
            let h1a = g.gelu(h1)?;
            let h2 = self.lora_linear(&mut g, h1a, &format!("blocks.{l}.mlp.fc2"), &mut dropout)?;
            x = g.add(x, h2)?;
        }

        let lnf_g = g.leaf("ln_f.gamma", &self.params["ln_f.gamma"])?;
        let lnf_b = g.leaf("ln_f.beta", &self.params["ln_f.beta"])?;
        let hfinal = g.layernorm(x, lnf_g, lnf_b, LN_EPS)?;
        let head = g.leaf("head.w", &self.params["head.w"])?;
        let logits = g.matmul(hfinal, head)?;

        let hidden = capture.hidden.then(|| g.value(hfinal).clone());
        Ok(ForwardPass {
            graph: g,
            logits,
            image_leaf,
            attention: capture.attention.then_some(attn_capture),
            hidden,
        })
    }

    /// Forward pass for an evaluation context (no dropout).
    pub fn forward_eval(
        &self,
        images: &[&Tensor],
        tokens: &[usize],
        positions: &[usize],
        mask: &AttentionMask,
        capture: CaptureOptions,
    ) -> Result<ForwardPass> {
        self.forward::<rand_chacha::ChaCha8Rng>(
            images, tokens, positions, mask, capture, false, None,
        )
    }

    /// Logits for the next token given the decoding context: image + prompt
    /// (+ latents unless dropped) + the `<ans>` cue + tokens emitted so far.
    pub fn next_token_logits(
        &self,
        images: &[&Tensor],
        prompt: &[usize],
        emitted: &[usize],
        policy: MaskPolicy,
        drop_latents: bool,
    ) -> Result<Vec<f64>> {
        let n_img: usize = images
            .iter()
            .map(|i| {
                (i.shape()[0] / self.config.patch_size) * (i.shape()[1] / self.config.patch_size)
            })
            .sum();
        let (tokens, layout) = self.assemble(n_img, prompt, emitted);
        let (eff_tokens, eff_layout) = if drop_latents {
            (self.drop_latent_tokens(&tokens, &layout), layout.without_latents())
        } else {
            (tokens, layout.clone())
        };
        let positions = layout.position_ids(drop_latents);
        let mask = build_mask(policy, &eff_layout)?;
        let fp = self.forward_eval(
            images,
            &eff_tokens,
            &positions,
            &mask,
            CaptureOptions::default(),
        )?;
        let logits = fp.graph.value(fp.logits);
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    /// Greedy decoding over the full base vocabulary. Latent tokens are
    /// inserted by layout and never sampled (they have no logit column).
    /// Decoding stops after `max_new` tokens or at EOS (the EOS itself is
    /// included in the returned tokens).
    pub fn generate(
        &self,
        images: &[&Tensor],
        prompt: &[usize],
        policy: MaskPolicy,
        drop_latents: bool,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let mut emitted: Vec<usize> = Vec::new();
        loop {
            let row = self.next_token_logits(images, prompt, &emitted, policy, drop_latents)?;
            let next = argmax(&row);
            emitted.push(next);
            if next == self.vocab.eos() || emitted.len() >= max_new {
                return Ok(emitted);
            }
        }
    }

    /// Multiple-choice decoding: pick the option letter with the highest
    /// logit at the answer position. This is top-1 selection over the
    /// provided choices; an untrained model therefore scores at chance
    /// rather than emitting out-of-option tokens.
    pub fn choose_option(
        &self,
        images: &[&Tensor],
        prompt: &[usize],
        n_options: usize,
        policy: MaskPolicy,
        drop_latents: bool,
    ) -> Result<usize> {
        let row = self.next_token_logits(images, prompt, &[], policy, drop_latents)?;
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..n_options {
            let v = row[self.vocab.letter(i)];
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        Ok(best)
    }

    /// Run the same prompt with two images and report how far the logits at
    /// the answer-predicting rows move. Under the bottleneck mask with
    /// latents dropped the difference is exactly zero; with latents present
    /// it is generically positive.
    pub fn substitute_image_eval(
        &self,
        image_a: &Tensor,
        image_b: &Tensor,
        prompt: &[usize],
        answer: &[usize],
        policy: MaskPolicy,
        drop_latents: bool,
    ) -> Result<(Tensor, Tensor, f64)> {
        let p = self.config.patch_size;
        let n_img = (image_a.shape()[0] / p) * (image_a.shape()[1] / p);
        let (tokens, layout) = self.assemble(n_img, prompt, answer);
        let (eff_tokens, eff_layout) = if drop_latents {
            (self.drop_latent_tokens(&tokens, &layout), layout.without_latents())
        } else {
            (tokens, layout.clone())
        };
        let positions = layout.position_ids(drop_latents);
        let mask = build_mask(policy, &eff_layout)?;
        let answer_logits = |img: &Tensor| -> Result<Tensor> {
            let mut fp = self.forward_eval(
                &[img],
                &eff_tokens,
                &positions,
                &mask,
                CaptureOptions::default(),
            )?;
            let span = &eff_layout.answer_span;
            let rows = fp.graph.slice_rows(fp.logits, span.start - 1, span.end - 1)?;
            Ok(fp.graph.value(rows).clone())
        };
        let la = answer_logits(image_a)?;
        let lb = answer_logits(image_b)?;
        let diff = la.max_abs_diff(&lb);
        Ok((la, lb, diff))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
