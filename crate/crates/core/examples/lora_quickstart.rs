//! Minimal end-to-end run: pretrain a toy base, inject low-rank pairs,
//! fine-tune on the token-substitution translation task, and merge the
//! update back into the base.
//!
//! Run with: cargo run --release --example lora_quickstart

use peft_lab::model::ModelConfig;
use peft_lab::peft::{self, CountShape, PeftMethod};
use peft_lab::tasks::{gen_task, pretrain_base, Split, TaskKind};
use peft_lab::train::{evaluate, train, TrainConfig};

fn main() -> peft_lab::Result<()> {
    let config = ModelConfig {
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: 32,
        max_seq_len: 12,
        seed: 7,
    };

    println!("pretraining the shared base ...");
    let mut model = pretrain_base::<f32>(&config, 5, 800)?;

    let method = PeftMethod::Lora { r: 4 };
    peft::inject(&mut model, method, 1)?;
    let shape = CountShape::from_config(&config);
    let (count, pct) = peft::count_trainable(&shape, method);
    println!(
        "trainable: {} of {} total",
        peft::format_count(count, pct),
        shape.total
    );

    let task = gen_task(TaskKind::SubstTranslate, 21, 512, 32, 32, 32, (2, 6), 1.0)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_steps: 400,
        eval_interval: 100,
        patience: 3,
        seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train(model, &task, &cfg)?;
    for point in &outcome.curve {
        println!(
            "step {:4}  train loss {:.4}  dev {} {:.4}",
            point.step, point.train_loss, point.metric, point.dev_metric
        );
    }

    let test = evaluate(&outcome.best, &task, Split::Test)?;
    println!("test BLEU-4: {test:.3}");

    // Fold the low-rank update into the base weights; the merged model
    // carries no extra structures but computes the same function.
    let merged = peft::merge_lora(outcome.best)?;
    let test_merged = evaluate(&merged, &task, Split::Test)?;
    println!("test BLEU-4 after merge: {test_merged:.3}");
    Ok(())
}
