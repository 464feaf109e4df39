//! A reduced ablation matrix through the experiment driver: dataset on disk,
//! every variant and supervised mode over two seeds, one table out.
//!
//! ```text
//! cargo run --release --example ablation -- /tmp/dtml-ablation 120
//! ```

use std::path::PathBuf;

use dtml::experiment::{cmd_ablate, cmd_generate, ExperimentConfig};
use dtml::nn::ArchDescriptor;
use dtml::Result;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let root = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dtml-ablation"));
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(120);

    let mut cfg = ExperimentConfig::default();
    cfg.seed = 3;
    cfg.out_dir = root.join("run");
    cfg.dataset.dir = root.join("data");
    cfg.dataset.count = 16;
    cfg.dataset.test_count = 4;
    cfg.dataset.labeled_fraction = 0.25;
    cfg.train.total_iterations = iterations;
    cfg.train.base_lr = 0.05;
    cfg.train.lr_decay_every = iterations * 3 / 4;
    cfg.train.crop_shape = [32, 32, 16];
    cfg.train.eval_stride = [16, 16, 8];
    cfg.train.eval_every = iterations / 2;
    cfg.train.descriptor = ArchDescriptor {
        levels: 3,
        base_width: 4,
        ..Default::default()
    };
    cfg.ablate.seeds = vec![1, 2];
    cfg.validate()?;

    cmd_generate(&cfg)?;
    let report = cmd_ablate(&cfg, None)?;
    println!("{:<24} {:>8} {:>8} {:>8} {:>8}", "method", "dice", "±", "asd", "hd95");
    for row in &report.rows {
        println!(
            "{:<24} {:>8.4} {:>8.4} {:>8.3} {:>8.3}",
            row.label(),
            row.mean.dice,
            row.std.dice,
            row.mean.asd,
            row.mean.hd95
        );
    }
    println!("tables written to {}", cfg.out_dir.display());
    Ok(())
}
