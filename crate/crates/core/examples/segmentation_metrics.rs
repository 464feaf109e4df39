//! Overlap and surface metrics between a reference sphere and progressively
//! shifted copies.
//!
//! ```text
//! cargo run --example segmentation_metrics
//! ```

use dtml::metrics::{surface_distances, MetricsReport};
use dtml::{Geometry, Mask, Result};

fn sphere(geom: Geometry, centre: [f64; 3], radius: f64) -> Mask {
    let mut m = Mask::empty(geom);
    let [nx, ny, nz] = geom.shape;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x, y, z];
                let d2: f64 = (0..3)
                    .map(|k| (p[k] as f64 * geom.spacing[k] - centre[k]).powi(2))
                    .sum();
                m.set(x, y, z, d2 <= radius * radius);
            }
        }
    }
    m
}

fn main() -> Result<()> {
    let geom = Geometry::new([32, 32, 32], [0.8, 0.8, 1.0])?;
    let gt = sphere(geom, [12.8, 12.8, 16.0], 8.0);
    println!("{:>8} {:>7} {:>7} {:>7} {:>7}", "shift", "dice", "jaccard", "asd", "hd95");
    for shift in [0.0, 0.8, 1.6, 3.2, 6.4] {
        let pred = sphere(geom, [12.8 + shift, 12.8, 16.0], 8.0);
        let r = MetricsReport::evaluate(&pred, &gt)?;
        println!(
            "{shift:>6.1}mm {:>7.4} {:>7.4} {:>7.3} {:>7.3}",
            r.dice, r.jaccard, r.asd, r.hd95
        );
    }

    let pred = sphere(geom, [14.0, 12.8, 16.0], 6.5);
    let (p_to_g, g_to_p) = surface_distances(&pred, &gt)?;
    println!(
        "smaller offset sphere: {} + {} boundary distances, max {:.3} mm",
        p_to_g.len(),
        g_to_p.len(),
        p_to_g.iter().chain(&g_to_p).fold(0.0f64, |a, &b| a.max(b))
    );
    Ok(())
}
