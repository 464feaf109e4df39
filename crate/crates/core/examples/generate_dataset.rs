//! Writes a synthetic dataset with a manifest, then reloads it as a
//! semi-supervised split.
//!
//! ```text
//! cargo run --example generate_dataset -- /tmp/dtml-data
//! ```

use std::path::PathBuf;

use dtml::data::load_split;
use dtml::experiment::{cmd_generate, ExperimentConfig};
use dtml::Result;

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dtml-data"));
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 7;
    cfg.dataset.dir = dir.clone();
    cfg.dataset.count = 20;
    cfg.dataset.test_count = 5;
    cfg.validate()?;

    let manifest = cmd_generate(&cfg)?;
    println!(
        "wrote {} labeled, {} unlabeled and {} test cases to {}",
        manifest.labeled.len(),
        manifest.unlabeled.len(),
        manifest.test.len(),
        dir.display()
    );

    let split = load_split(&dir.join("manifest.json"), false)?;
    for case in &split.labeled {
        println!(
            "{}: shape {:?}, foreground {:.1}%",
            case.id,
            case.volume.shape(),
            100.0 * case.mask.foreground_fraction()
        );
    }
    println!("unlabeled cases carry images only: {}", split.unlabeled.len());
    Ok(())
}
