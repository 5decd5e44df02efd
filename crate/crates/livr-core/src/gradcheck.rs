//! Finite-difference gradient checking.
//!
//! The check is the independent oracle for the backward pass: it re-derives
//! every sampled partial derivative from two forward evaluations and never
//! touches the analytic path it is judging.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::substream;
use crate::tensor::Tensor;

pub type ParamSet = BTreeMap<String, Tensor>;

/// A deterministic loss builder: constructs a fresh graph from the given
/// parameters and returns it together with the scalar loss node.
pub trait LossBuilder {
    fn build(&self, params: &ParamSet) -> Result<(Graph, NodeId)>;
}

impl<F> LossBuilder for F
where
    F: Fn(&ParamSet) -> Result<(Graph, NodeId)>,
{
    fn build(&self, params: &ParamSet) -> Result<(Graph, NodeId)> {
        self(params)
    }
}

fn eval_loss(f: &dyn LossBuilder, params: &ParamSet) -> Result<f64> {
    let (graph, loss) = f.build(params)?;
    Ok(graph.value(loss).item())
}

/// Compare analytic gradients against central finite differences with step
/// `h`, over up to `samples_per_param` coordinates of each parameter.
///
/// Returns the maximum relative error
/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// Fails if `f` is non-deterministic (two evaluations of the unperturbed
/// loss disagree bitwise).
pub fn grad_check(
    f: &dyn LossBuilder,
    params: &ParamSet,
    h: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Config("grad_check: h must be > 0".into()));
    }
    // Gradients are wanted for every parameter under check.
    let mut params: ParamSet = params.clone();
    for t in params.values_mut() {
        t.requires_grad = true;
    }

    let (mut graph, loss) = f.build(&params)?;
    let base = graph.value(loss).item();
    let grads = graph.backward(loss)?;

    let second = eval_loss(f, &params)?;
    if base.to_bits() != second.to_bits() {
        return Err(Error::Graph(format!(
            "grad_check: non-deterministic loss builder ({base} vs {second})"
        )));
    }

    let mut max_rel = 0.0_f64;
    for (pi, (name, tensor)) in params.clone().iter().enumerate() {
        let n = tensor.numel();
        if n == 0 {
            continue;
        }
        let mut rng = substream(seed, "gradcheck", pi as u64);
        let count = samples_per_param.min(n);
        // Sample distinct coordinates when feasible, with replacement otherwise.
        let mut coords: Vec<usize> = if count == n {
            (0..n).collect()
        } else {
            (0..count).map(|_| rng.random_range(0..n)).collect()
        };
        coords.sort_unstable();
        coords.dedup();

        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Graph(format!("grad_check: no gradient for `{name}`")))?;
        for &c in &coords {
            let orig = params[name].data()[c];
            params.get_mut(name).unwrap().data_mut()[c] = orig + h;
            let plus = eval_loss(f, &params)?;
            params.get_mut(name).unwrap().data_mut()[c] = orig - h;
            let minus = eval_loss(f, &params)?;
            params.get_mut(name).unwrap().data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// A randomized tiny-transformer loss case for gradient verification: a
/// small model, a random masked sequence, and the answer-span NLL as the
/// scalar loss. Returns the parameter subset under check and a deterministic
/// builder closure over it.
pub fn transformer_case(
    seed: u64,
) -> (ParamSet, impl Fn(&ParamSet) -> Result<(Graph, NodeId)>) {
    use crate::layout::{LatentConfig, LatentPlacement};
    use crate::mask::{build_mask, MaskPolicy};
    use crate::model::{init_model, CaptureOptions, LoraConfig, ModelConfig};
    use crate::train::answer_nll;

    let mut rng = substream(seed, "gradcheck/case", 0);
    let d = [8, 16, 32][rng.random_range(0..3usize)];
    let n_heads = [2, 4][rng.random_range(0..2usize)];
    let n_layers = rng.random_range(1..=2usize);
    let k = [0, 2, 4][rng.random_range(0..3usize)];
    let config = ModelConfig {
        d_model: d,
        n_layers,
        n_heads,
        mlp_ratio: 2,
        image_h: 16,
        image_w: 16,
        channels: 1,
        patch_size: 8,
        max_seq_len: 48,
        latent: LatentConfig {
            k,
            placement: if rng.random::<bool>() {
                LatentPlacement::AfterPrompt
            } else {
                LatentPlacement::BeforePrompt
            },
            embeddings: crate::layout::LatentEmbeddings::Unshared,
            rows_trainable: true,
        },
        lora: LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0, ..Default::default() },
        full_finetune: false,
    };
    let mut model = init_model(&config, seed).expect("valid config");
    // lora_b starts at zero, which would make the adapter path (and every
    // lora_a gradient) vanish; nudge all B matrices so the check is
    // non-trivial.
    for (path, tensor) in model.params.iter_mut() {
        if path.ends_with(".lora_b") {
            for v in tensor.data_mut() {
                *v = (rng.random::<f64>() - 0.5) * 0.2;
            }
        }
    }
    let policy = match rng.random_range(0..4u32) {
        0 => MaskPolicy::Standard,
        1 => MaskPolicy::Bottleneck,
        2 => MaskPolicy::AnsToVisOnly,
        _ => MaskPolicy::BottleneckPlusLatentPromptBlock,
    };

    let vocab = model.vocab.clone();
    let prompt: Vec<usize> = (0..rng.random_range(3..=5usize))
        .map(|_| rng.random_range(0..vocab.base_size()))
        .collect();
    let answer: Vec<usize> = (0..rng.random_range(1..=2usize))
        .map(|_| rng.random_range(0..vocab.base_size()))
        .collect();
    let mut image = Tensor::zeros(vec![16, 16]);
    for v in image.data_mut() {
        *v = rng.random::<f64>();
    }

    // Check a representative subset: the latent rows, one adapter pair, and
    // one frozen base projection.
    let mut params = ParamSet::new();
    let mut add = |path: &str| {
        params.insert(path.to_string(), model.params[path].clone());
    };
    if k > 0 {
        add("embed.latent");
    }
    add("blocks.0.attn.wq.lora_a");
    add("blocks.0.mlp.fc2.lora_b");
    add("blocks.0.attn.wv");
    add("head.w");

    let builder = move |p: &ParamSet| -> Result<(Graph, NodeId)> {
        let mut m = model.clone();
        for (path, tensor) in p {
            let slot = m.params.get_mut(path).expect("known path");
            *slot = tensor.clone();
        }
        let n_img = m.config.n_image_tokens();
        let (tokens, layout) = m.assemble(n_img, &prompt, &answer);
        let positions = layout.position_ids(false);
        let mask = build_mask(policy, &layout)?;
        let fp = m.forward::<rand_chacha::ChaCha8Rng>(
            &[&image],
            &tokens,
            &positions,
            &mask,
            CaptureOptions::default(),
            false,
            None,
        )?;
        let mut targets = vec![m.vocab.pad(); layout.total_len];
        for (j, &tok) in tokens.iter().enumerate() {
            targets[n_img + j] = tok;
        }
        let mut graph = fp.graph;
        let loss = answer_nll(&mut graph, fp.logits, &targets, &layout)?;
        Ok((graph, loss))
    };
    (params, builder)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let mut params = ParamSet::new();
        params.insert("w".into(), Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let f = |p: &ParamSet| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let w = g.leaf("w", &p["w"])?;
            let c = g.input(Tensor::new(vec![1, 4], vec![3.0, 1.0, -2.0, 4.0]).unwrap());
            let prod = g.mul(w, c)?;
            let loss = g.sum_all(prod)?;
            Ok((g, loss))
        };
        let err = grad_check(&f, &params, 1e-5, 16, 0).unwrap();
        assert!(err < 1e-10, "linear map error {err}");
    }

    #[test]
    fn softmax_cross_entropy_head() {
        let mut params = ParamSet::new();
        params.insert(
            "w".into(),
            Tensor::new(vec![3, 5], (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.13).collect())
                .unwrap(),
        );
        let f = |p: &ParamSet| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let w = g.leaf("w", &p["w"])?;
            let x = g.input(
                Tensor::new(vec![2, 3], vec![0.4, -0.7, 1.2, 0.1, 0.9, -0.3]).unwrap(),
            );
            let logits = g.matmul(x, w)?;
            let loss = g.cross_entropy(logits, &[2, 0])?;
            Ok((g, loss))
        };
        let err = grad_check(&f, &params, 1e-5, 15, 1).unwrap();
        assert!(err < 1e-4, "softmax+ce error {err}");
    }
}
