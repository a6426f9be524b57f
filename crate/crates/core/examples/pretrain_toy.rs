//! Pretrains the toy model with VTM + MLM on the generated corpus and reports
//! held-out accuracies.
//!
//! cargo run --example pretrain_toy -- [steps] [p_ld]

use anyhow::Result;
use perceiver_vl::corpus::{generate, CorpusConfig, Split};
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::training::{evaluate_pretrain, pretrain, MaskSpec, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<()> {
    let mut cfg = ModelConfig::default();
    let tc = TrainConfig {
        steps: arg(1, 300),
        ..TrainConfig::default()
    };
    cfg.encoder.p_ld = arg(2, cfg.encoder.p_ld);

    let corpus = generate(&CorpusConfig::default())?;
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    let (model, mut store) = PerceiverVl::init::<f32>(&cfg, 0)?;

    let start = std::time::Instant::now();
    let history = pretrain(&model, &mut store, &train, &tc, 0, None)?;
    for (step, m) in history.iter().enumerate() {
        if step % 50 == 0 || step + 1 == history.len() {
            println!(
                "step {step:5} loss {:.4} vtm {:.4} mlm {:.4} acc_vtm {:.3} acc_mlm {:.3} lr {:.2e}",
                m["loss"], m["loss_vtm"], m["loss_mlm"], m["acc_vtm"], m["acc_mlm"], m["lr"]
            );
        }
    }
    println!("trained {} steps in {:.1}s", tc.steps, start.elapsed().as_secs_f64());

    let eval = evaluate_pretrain(&model, &store, &val, &MaskSpec::default(), &model.full_depth(), 1)?;
    println!(
        "held-out: acc_vtm {:.3}  acc_mlm {:.3}  ({} masked tokens)",
        eval["acc_vtm"], eval["acc_mlm"], eval["masked_tokens"]
    );
    Ok(())
}
