//! Builds the two-head backbone, runs both heads on a random volume and
//! takes one gradient of the segmentation loss.
//!
//! ```text
//! cargo run --example network
//! ```

use dtml::losses::loss_seg_with_grad;
use dtml::nn::{build_backbone, forward_dis, forward_seg, value_and_grad, ArchDescriptor, Backbone, Head};
use dtml::{Geometry, Mask, ProbabilityMap, Result, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let desc = ArchDescriptor {
        levels: 3,
        base_width: 4,
        ..Default::default()
    };
    let params = build_backbone(desc, 11)?;
    println!("{} tensors, {} scalars", params.tensors.len(), params.num_scalars());
    for t in params.tensors.iter().take(4) {
        println!("  {:<24} {:?}", t.name, t.shape);
    }

    let geom = Geometry::isotropic([16, 16, 16])?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Volume::new(geom, (0..geom.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let p = forward_seg(&params, &x)?;
    let z = forward_dis(&params, &x)?;
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    println!("seg head mean {:.4}, distance head mean {:.4}", mean(p.data()), mean(z.data()));

    let mut gt = Mask::empty(geom);
    for i in 0..geom.len() / 2 {
        let [x, y, z] = geom.coords(i);
        gt.set(x, y, z, true);
    }
    let backbone = Backbone::new(desc)?;
    let (loss, grads) = value_and_grad(&backbone, &params, &x, Head::Seg, |out| {
        loss_seg_with_grad(&ProbabilityMap::new(geom, out.to_vec())?, &gt)
    })?;
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    println!("segmentation loss {loss:.4}, gradient norm {norm:.4}");
    Ok(())
}
