//! Signed distance maps of a synthetic ellipsoid on an anisotropic grid, and
//! the smooth transform back to foreground probabilities.
//!
//! ```text
//! cargo run --example signed_distance
//! ```

use dtml::sdm::{compute_sdm, extract_boundary, normalize_sdm, sdm_to_soft_mask, TransformConfig};
use dtml::{binarize, Geometry, Mask, Result};

fn main() -> Result<()> {
    let geom = Geometry::new([40, 40, 20], [1.0, 1.0, 2.0])?;
    let mut mask = Mask::empty(geom);
    for z in 0..20 {
        for y in 0..40 {
            for x in 0..40 {
                let (dx, dy, dz) = (x as f64 - 19.5, y as f64 - 19.5, 2.0 * (z as f64 - 9.5));
                if (dx / 12.0).powi(2) + (dy / 8.0).powi(2) + (dz / 14.0).powi(2) <= 1.0 {
                    mask.set(x, y, z, true);
                }
            }
        }
    }
    println!(
        "mask: {} foreground voxels, {} on the boundary",
        mask.count(),
        extract_boundary(&mask)?.len()
    );

    let raw = compute_sdm(&mask)?;
    let (lo, hi) = raw
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("raw distances (mm): deepest inside {lo:.2}, farthest outside {hi:.2}");

    let sdm = normalize_sdm(&raw)?;
    let centre = geom.index(20, 20, 10);
    println!("normalized value at the centre: {:.4}", sdm.data()[centre]);

    for k in [10.0, 100.0, 1500.0] {
        let soft = sdm_to_soft_mask(&sdm, TransformConfig::new(k)?);
        let back = binarize(&soft, 0.5)?;
        let flipped = (0..geom.len())
            .filter(|&i| back.data()[i] != mask.data()[i])
            .count();
        let fuzzy = soft.data().iter().filter(|&&p| p > 0.05 && p < 0.95).count();
        println!("k = {k:>6}: {flipped} voxels differ after thresholding, {fuzzy} voxels in (0.05, 0.95)");
    }
    Ok(())
}
