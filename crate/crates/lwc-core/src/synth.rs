//! Deterministic synthetic test rasters: smooth color gradients, a few
//! sinusoidal textures, one hard diagonal edge, and mild speckle. Compressible
//! like natural photos, but reproducible from a seed with no corpus on disk.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ppm::Image;

pub fn synth_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
    let base: [f64; 3] = [(); 3].map(|_| rng.gen_range(72.0..184.0));
    let grad: [(f64, f64); 3] = [(); 3].map(|_| {
        (rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0))
    });

    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            fx: rng.gen_range(0.5..4.0),
            fy: rng.gen_range(0.5..4.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: [(); 3].map(|_| rng.gen_range(4.0..26.0)),
        })
        .collect();

    // One straight edge: a brightness step across a random line.
    let (nx, ny) = {
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        (a.cos(), a.sin())
    };
    let edge_off = rng.gen_range(0.3..0.7);
    let edge_amp: [f64; 3] = [(); 3].map(|_| rng.gen_range(-30.0..30.0));

    let noise_amp = rng.gen_range(1.0..3.0);

    let mut rgb = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w.max(2) as f64;
            let v = y as f64 / h.max(2) as f64;
            let side = if nx * u + ny * v > edge_off { 1.0 } else { 0.0 };
            for c in 0..3 {
                let mut val = base[c] + grad[c].0 * u + grad[c].1 * v + edge_amp[c] * side;
                for wave in &waves {
                    val += wave.amp[c]
                        * (std::f64::consts::TAU * (wave.fx * u + wave.fy * v) + wave.phase).sin();
                }
                val += rng.gen_range(-noise_amp..noise_amp);
                rgb.push(val.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(w, h, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_seed_sensitive() {
        let a = synth_image(33, 21, 5);
        let b = synth_image(33, 21, 5);
        let c = synth_image(33, 21, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.rgb.len(), 3 * 33 * 21);
    }

    #[test]
    fn uses_a_reasonable_value_range() {
        let img = synth_image(64, 48, 11);
        let mean: f64 = img.rgb.iter().map(|&v| v as f64).sum::<f64>() / img.rgb.len() as f64;
        assert!((40.0..220.0).contains(&mean), "mean {mean}");
        let distinct: std::collections::HashSet<u8> = img.rgb.iter().copied().collect();
        assert!(distinct.len() > 50, "suspiciously flat image");
    }
}
