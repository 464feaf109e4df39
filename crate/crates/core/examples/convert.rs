//! Mask to signed distance map and back through the on-disk formats.
//!
//! ```text
//! cargo run --example convert -- /tmp/dtml-convert
//! ```

use std::path::PathBuf;

use dtml::data::io::{read_mask, read_raw, write_mask};
use dtml::data::generate_synthetic;
use dtml::experiment::{cmd_convert, ConvertConfig, Direction, ExperimentConfig};
use dtml::Result;

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dtml-convert"));
    let (_, mask) = generate_synthetic(1, [32; 3], 9)?.remove(0);
    let mask_path = dir.join("mask.raw");
    write_mask(&mask_path, &mask)?;

    let mut cfg = ExperimentConfig::default();
    for (input, output, direction) in [
        ("mask.raw", "sdm.raw", Direction::MaskToSdm),
        ("sdm.raw", "mask_back.raw", Direction::SdmToMask),
    ] {
        cfg.convert = Some(ConvertConfig {
            input: dir.join(input),
            output: dir.join(output),
            direction,
            k: 1500.0,
            threshold: 0.5,
        });
        let out = cmd_convert(&cfg)?;
        let (sidecar, _) = read_raw(&out)?;
        println!("{input} -> {output}: {:?} {:?}", sidecar.dtype, sidecar.role);
    }

    let back = read_mask(&dir.join("mask_back.raw"))?;
    let differing = mask.data().iter().zip(back.data()).filter(|(a, b)| a != b).count();
    println!("round trip: {differing} of {} voxels differ", mask.data().len());
    Ok(())
}
