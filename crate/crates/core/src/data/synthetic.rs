//! Synthetic volumes: unions of one to three randomly oriented ellipsoids with
//! a sinusoidal surface perturbation, rendered with overlapping foreground and
//! background intensity distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{DtmlError, Result};
use crate::grid::{Geometry, Mask, Shape3, Spacing3, Volume};

/// Accepted foreground fraction range; draws outside it are regenerated.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.4);
pub const MIN_AXIS: usize = 32;

/// Rendering knobs. The defaults give a task a small network learns in a few
/// hundred iterations but cannot solve by thresholding alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticStyle {
    pub foreground_mean: f64,
    pub background_mean: f64,
    /// Amplitude of the smooth additive texture.
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub spacing: Spacing3,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            foreground_mean: 1.0,
            background_mean: 0.0,
            texture_amplitude: 0.35,
            noise_std: 0.6,
            spacing: [1.0; 3],
        }
    }
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
    /// Rows are the body axes.
    axes: [[f64; 3]; 3],
    amplitude: f64,
    freq: (f64, f64),
    phase: (f64, f64),
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, anchor: Option<&Ellipsoid>, dims: [f64; 3]) -> Self {
        let min_dim = dims.iter().cloned().fold(f64::INFINITY, f64::min);
        let radii = [0; 3].map(|_| rng.gen_range(0.15..0.3) * min_dim);
        let centre = match anchor {
            None => [0, 1, 2].map(|k| dims[k] * (0.5 + rng.gen_range(-0.12..0.12))),
            // Attach to the anchor so the union stays one connected body.
            Some(a) => {
                let dir: [f64; 3] = UnitSphere.sample(rng);
                let reach = 0.8 * a.radii.iter().cloned().fold(0.0, f64::max);
                [0, 1, 2].map(|k| {
                    (a.centre[k] + dir[k] * reach).clamp(0.25 * dims[k], 0.75 * dims[k])
                })
            }
        };
        Self {
            centre,
            radii,
            axes: random_rotation(rng),
            amplitude: rng.gen_range(0.05..0.15),
            freq: (rng.gen_range(2..=4) as f64, rng.gen_range(1..=3) as f64),
            phase: (
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ),
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|k| p[k] - self.centre[k]);
        let u = [0, 1, 2].map(|r| {
            (self.axes[r][0] * d[0] + self.axes[r][1] * d[1] + self.axes[r][2] * d[2])
                / self.radii[r]
        });
        let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if rho < 1e-9 {
            return true;
        }
        let azimuth = u[1].atan2(u[0]);
        let polar = (u[2] / rho).clamp(-1.0, 1.0).acos();
        let bump = (self.freq.0 * azimuth + self.phase.0).sin()
            * (self.freq.1 * polar + self.phase.1).cos();
        rho < 1.0 + self.amplitude * bump
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Uniform unit quaternion.
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let mut q = [0.0; 4].map(|_| n.sample(rng));
    let len = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    q.iter_mut().for_each(|v| *v /= len);
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn draw_mask(geom: &Geometry, rng: &mut ChaCha8Rng) -> Mask {
    let dims = geom.shape.map(|n| n as f64);
    loop {
        let first = Ellipsoid::random(rng, None, dims);
        let mut parts = vec![];
        for _ in 1..rng.gen_range(1..=3) {
            parts.push(Ellipsoid::random(rng, Some(&first), dims));
        }
        parts.push(first);
        let data = (0..geom.len())
            .map(|i| {
                let c = geom.coords(i);
                let p = c.map(|v| v as f64 + 0.5);
                parts.iter().any(|e| e.contains(p))
            })
            .collect();
        let mask = Mask::new(*geom, data).expect("sized to geometry");
        let f = mask.foreground_fraction();
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&f) {
            return mask;
        }
    }
}

/// One pass of a 3×3×3 box filter with edge clamping.
fn box_blur(geom: &Geometry, src: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = geom.shape;
    let mut out = vec![0.0; src.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                let mut n = 0.0;
                for zz in z.saturating_sub(1)..(z + 2).min(nz) {
                    for yy in y.saturating_sub(1)..(y + 2).min(ny) {
                        for xx in x.saturating_sub(1)..(x + 2).min(nx) {
                            acc += src[geom.index(xx, yy, zz)];
                            n += 1.0;
                        }
                    }
                }
                out[geom.index(x, y, z)] = acc / n;
            }
        }
    }
    out
}

fn render(mask: &Mask, style: &SyntheticStyle, rng: &mut ChaCha8Rng) -> Volume {
    let geom = *mask.geometry();
    let base: Vec<f64> = mask
        .data()
        .iter()
        .map(|&f| {
            if f {
                style.foreground_mean
            } else {
                style.background_mean
            }
        })
        .collect();
    let blurred = box_blur(&geom, &base);
    // Smooth texture: a few low-frequency plane waves.
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let freq = rng.gen_range(0.5..2.0) * std::f64::consts::TAU;
            let scaled = [0, 1, 2].map(|k| dir[k] * freq / geom.shape[k] as f64);
            (scaled, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.0))
        })
        .collect();
    let weight: f64 = waves.iter().map(|w| w.2).sum();
    let noise = Normal::new(0.0, style.noise_std.max(0.0)).expect("finite noise std");
    let data = blurred
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let c = geom.coords(i).map(|v| v as f64);
            let tex: f64 = waves
                .iter()
                .map(|(k, ph, a)| a * (k[0] * c[0] + k[1] * c[1] + k[2] * c[2] + ph).sin())
                .sum::<f64>()
                / weight;
            b + style.texture_amplitude * tex + noise.sample(rng)
        })
        .collect();
    Volume::new(geom, data).expect("finite intensities")
}

/// `count` labeled volumes of `shape`, reproducible from `seed`. Sample `i`
/// draws from its own random stream, so a prefix of a larger draw is
/// identical to a smaller draw.
pub fn generate_synthetic(count: usize, shape: Shape3, seed: u64) -> Result<Vec<(Volume, Mask)>> {
    generate_synthetic_with(count, shape, seed, &SyntheticStyle::default())
}

pub fn generate_synthetic_with(
    count: usize,
    shape: Shape3,
    seed: u64,
    style: &SyntheticStyle,
) -> Result<Vec<(Volume, Mask)>> {
    if shape.iter().any(|&n| n < MIN_AXIS) {
        return Err(DtmlError::InvalidShape(format!(
            "synthetic volumes need at least {MIN_AXIS} voxels per axis, got {shape:?}"
        )));
    }
    let geom = Geometry::new(shape, style.spacing)?;
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mask = draw_mask(&geom, &mut rng);
            let volume = render(&mask, style, &mut rng);
            (volume, mask)
        })
        .collect())
}
