//! Deterministic synthetic test images.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::image_io::{Image, ImagePlane};

/// Piecewise-smooth grayscale scene: a shaded background with random
/// discs, rectangles and a band of stripes. Values lie in `[0.1, 0.9]`.
pub fn scene(height: usize, width: usize, seed: u64) -> ImagePlane {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let (gx, gy): (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let base: f64 = rng.random_range(0.35..0.65);
    let mut img = Image::from_vec(
        height,
        width,
        1,
        (0..height * width)
            .map(|i| base + gx * ((i % width) as f64 / w - 0.5) + gy * ((i / width) as f64 / h - 0.5))
            .collect(),
    )
    .expect("shape");
    let shapes = 3 + (height * width) / 1024;
    for _ in 0..shapes {
        let level: f64 = rng.random_range(0.1..0.9);
        let (cy, cx) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let size = rng.random_range(0.08..0.3) * h.min(w);
        let disc = rng.random_bool(0.5);
        for r in 0..height {
            for c in 0..width {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= size * size
                } else {
                    dy.abs() <= size && dx.abs() <= 0.6 * size
                };
                if inside {
                    img.set(r, c, 0, level);
                }
            }
        }
    }
    let period = rng.random_range(4.0..9.0);
    let top = rng.random_range(0..height / 2);
    for r in top..(top + height / 4).min(height) {
        for c in 0..width {
            let v = 0.5 + 0.3 * (2.0 * std::f64::consts::PI * c as f64 / period).sin();
            img.set(r, c, 0, v);
        }
    }
    img.map(|v| v.clamp(0.1, 0.9))
}

/// Image made by repeating one random `tile x tile` texture.
pub fn tiled(height: usize, width: usize, tile: usize, seed: u64) -> ImagePlane {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let cells: Vec<f64> = (0..tile * tile).map(|_| rng.random_range(0.15..0.85)).collect();
    Image::from_vec(
        height,
        width,
        1,
        (0..height * width)
            .map(|i| cells[(i / width) % tile * tile + (i % width) % tile])
            .collect(),
    )
    .expect("shape")
}

/// Three-channel version of [`scene`] with a different tint per channel.
pub fn color_scene(height: usize, width: usize, seed: u64) -> ImagePlane {
    let planes: Vec<ImagePlane> = (0..3).map(|c| scene(height, width, seed.wrapping_add(c))).collect();
    let mut out = Image::zeros(height, width, 3);
    for r in 0..height {
        for c in 0..width {
            for (ch, p) in planes.iter().enumerate() {
                out.set(r, c, ch, p.get(r, c, 0));
            }
        }
    }
    out
}
