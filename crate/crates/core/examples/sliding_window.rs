//! Whole-volume prediction by overlapping windows: window layout, per-voxel
//! coverage and thresholded masks from both heads of a briefly trained
//! network.
//!
//! ```text
//! cargo run --release --example sliding_window
//! ```

use dtml::data::{generate_synthetic, DatasetSplit, LabeledCase};
use dtml::metrics::MetricsReport;
use dtml::nn::{ArchDescriptor, Head};
use dtml::trainer::{sliding_window_predict, train, window_coverage, window_starts, TrainConfig};
use dtml::Result;

fn main() -> Result<()> {
    let shape = [48, 40, 32];
    let (crop, stride) = ([32, 32, 16], [16, 16, 8]);
    for k in 0..3 {
        println!("axis {k}: starts {:?}", window_starts(shape[k], crop[k], stride[k]));
    }
    let cover = window_coverage(shape, crop, stride);
    println!(
        "coverage per voxel: min {} max {}",
        cover.iter().min().unwrap(),
        cover.iter().max().unwrap()
    );

    let mut cases: Vec<LabeledCase> = generate_synthetic(3, shape, 4)?
        .into_iter()
        .enumerate()
        .map(|(i, (volume, mask))| LabeledCase {
            id: format!("case_{i}"),
            volume,
            mask,
        })
        .collect();
    let held_out = cases.pop().expect("three cases");
    let split = DatasetSplit::new(cases, vec![], vec![])?;
    let cfg = TrainConfig {
        total_iterations: 150,
        base_lr: 0.05,
        crop_shape: crop,
        eval_stride: stride,
        eval_every: 0,
        descriptor: ArchDescriptor {
            levels: 3,
            base_width: 4,
            ..Default::default()
        },
        max_weight: 0.0,
        ..Default::default()
    };
    let state = train(&split, &cfg, None)?.state;

    let volume = held_out.volume.standardized();
    for (head, params) in [(Head::Seg, &state.params_s), (Head::Dis, &state.params_d)] {
        let pred = sliding_window_predict(params, &volume, crop, stride, head)?;
        let mask = pred.to_mask(0.5, cfg.transform())?;
        let r = MetricsReport::evaluate(&mask, &held_out.mask)?;
        println!("{} head on the held-out case: Dice {:.4}, 95HD {:.2}", head.name(), r.dice, r.hd95);
    }
    Ok(())
}
