// Scratch experiment: learnability and timing probe for the localization
// task. Not part of the deliverable test suite.

use livr_core::diag::{answer_to_latent_attention, evaluate};
use livr_core::mask::MaskPolicy;
use livr_core::model::{init_model, ModelConfig};
use livr_core::taskgen::{gen_example, TaskExample};
use livr_core::train::{run_livr, OptimizerConfig, SelectionRule, StageSchedule};
use livr_core::vocab::{TaskKind, Vocabulary};

const KIND: TaskKind = TaskKind::Localization;

fn data(seed: u64, lo: u64, hi: u64) -> Vec<TaskExample> {
    let vocab = Vocabulary::default_with_latents(0);
    (lo..hi).map(|i| gen_example(KIND, seed, i, &vocab).unwrap()).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let epochs1: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let epochs2: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1);
    let patch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8);
    let layers: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(2);
    let accum: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(8);
    let d: usize = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(64);
    let rank: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(4);

    let data_seed = 42;
    let train = data(data_seed, 0, n_train);
    let val = data(data_seed, n_train, n_train + 100);
    let test = data(data_seed, n_train + 250, n_train + 250 + 200);

    let mut cfg = ModelConfig::default();
    cfg.patch_size = patch;
    cfg.n_layers = layers;
    cfg.d_model = d;
    cfg.lora.rank = rank;
    cfg.lora.alpha = 2.0 * rank as f64;
    cfg.max_seq_len = 32 / patch * (32 / patch) * 2 + 64;
    if rank == 0 {
        cfg.full_finetune = true;
        cfg.lora.rank = 0;
    }
    let mut model = init_model(&cfg, seed).unwrap();
    let opt = OptimizerConfig { lr, accum, ..OptimizerConfig::default() };
    let schedule = StageSchedule { stage1_epochs: epochs1, stage2_epochs: epochs2 };

    let t0 = std::time::Instant::now();
    let out = run_livr(
        &mut model,
        &train,
        &val,
        &schedule,
        &opt,
        seed,
        SelectionRule::BestValidation,
        "probe",
    )
    .unwrap();
    let elapsed = t0.elapsed().as_secs_f64();

    for e in &out.record.epochs {
        println!(
            "stage {} epoch {:2}  loss {:.4}  val {:.3}  lr {:.2e}",
            e.stage, e.epoch, e.train_loss, e.val_accuracy, e.lr_last
        );
    }
    println!("train time: {elapsed:.1}s for {} epochs over {} examples", epochs1 + epochs2, n_train);

    // Evaluate the selected checkpoint.
    let mut selected = model.clone();
    selected.params = out.selected_params;
    let std_eval = evaluate(&selected, &test, MaskPolicy::Standard, false, false).unwrap();
    let btl_eval = evaluate(&selected, &test, MaskPolicy::Bottleneck, false, false).unwrap();
    let drop_eval = evaluate(&selected, &test, MaskPolicy::Standard, true, false).unwrap();
    println!("test standard   : {:.3}", std_eval.accuracy);
    println!("test bottleneck : {:.3}", btl_eval.accuracy);
    println!("test drop-latent: {:.3}", drop_eval.accuracy);
    let attn = answer_to_latent_attention(&selected, &test[..50], MaskPolicy::Standard).unwrap();
    println!("answer→latent attention: {:.4}", attn.mean_answer_to_latent);
}
