//! Semi-supervised training of both networks on a small synthetic split,
//! with the loss log and the labeled-set Dice of the selected checkpoint.
//!
//! ```text
//! cargo run --release --example train_dtml -- 200
//! ```

use dtml::data::{generate_synthetic, split_dataset, LabeledCase};
use dtml::nn::ArchDescriptor;
use dtml::trainer::{evaluate_cases, train, TrainConfig, Variant};
use dtml::Result;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let iterations = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);

    let mut cases: Vec<LabeledCase> = generate_synthetic(14, [32; 3], 21)?
        .into_iter()
        .enumerate()
        .map(|(i, (volume, mask))| LabeledCase {
            id: format!("case_{i:03}"),
            volume,
            mask,
        })
        .collect();
    let test = cases.split_off(10);
    let split = split_dataset(cases, 0.3, 21)?.with_test(test)?;

    let cfg = TrainConfig {
        total_iterations: iterations,
        base_lr: 0.05,
        lr_decay_every: iterations * 3 / 4,
        crop_shape: [32, 32, 16],
        eval_stride: [16, 16, 8],
        eval_every: 50,
        descriptor: ArchDescriptor {
            levels: 3,
            base_width: 4,
            ..Default::default()
        },
        variant: Variant::Dtml,
        ..Default::default()
    };
    let outcome = train(&split, &cfg, None)?;
    for row in outcome.log.iter().step_by((iterations / 10).max(1)) {
        println!(
            "iter {:>4}  lr {:.4}  λ {:.4}  seg {:.4}  md {:.4}  con {:.4}",
            row.iteration, row.lr, row.lambda_con, row.l_seg, row.l_md_supervised, row.l_con_s
        );
    }
    if let Some(best) = &outcome.best {
        println!("selected iteration {} (labeled Dice {:.4})", best.iteration, best.labeled_dice);
    }
    let chosen = outcome.chosen();
    let reports = evaluate_cases(&chosen.seg, cfg.variant.eval_head(), &split.test, &cfg.inference())?;
    let dice = reports.iter().map(|r| r.dice).sum::<f64>() / reports.len() as f64;
    println!("test Dice {dice:.4} over {} cases", reports.len());
    Ok(())
}
