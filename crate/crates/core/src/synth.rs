//! Seeded synthetic image corpora for desk-scale runs and tests.
//!
//! Ten pattern classes (stripes, shapes, gradients, checkers) with random
//! colours, phases and positions.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LmdError, Result};

pub const NUM_PATTERNS: usize = 10;

/// Renders one `size × size` image of pattern `class`.
pub fn pattern_image(class: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let mut color = || Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
    let (fg, bg) = (color(), color());
    let s = size as f64;
    let period = rng.random_range(0.2..0.35) * s;
    let phase = rng.random_range(0.0..period);
    let cx = rng.random_range(0.35..0.65) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    let radius = rng.random_range(0.2..0.32) * s;
    let noise: Vec<f64> = (0..(size * size)).map(|_| rng.random_range(-6.0..6.0)).collect();
    let mix = |t: f64, x: u32, y: u32| -> Rgb<u8> {
        let n = noise[(y * size + x) as usize];
        Rgb(std::array::from_fn(|c| {
            (fg[c] as f64 * t + bg[c] as f64 * (1.0 - t) + n)
                .round()
                .clamp(0.0, 255.0) as u8
        }))
    };
    let stripe = |v: f64| {
        if ((v + phase) / period).floor() as i64 % 2 == 0 {
            1.0
        } else {
            0.0
        }
    };
    RgbImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let dist = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
        let t = match class % NUM_PATTERNS {
            0 => stripe(fy),
            1 => stripe(fx),
            2 => stripe((fx + fy) / std::f64::consts::SQRT_2),
            3 => (dist < radius) as u8 as f64,
            4 => ((fx - cx).abs() < radius && (fy - cy).abs() < radius) as u8 as f64,
            5 => ((dist - radius).abs() < 0.35 * radius) as u8 as f64,
            6 => fx / s,
            7 => fy / s,
            8 => (stripe(fx) + stripe(fy)) % 2.0,
            _ => ((fx - cx).abs() < 0.3 * radius || (fy - cy).abs() < 0.3 * radius) as u8 as f64,
        };
        mix(t, x, y)
    })
}

/// `n` images as in-memory tensors, classes cycling through the patterns.
pub fn corpus(n: usize, size: u32, seed: u64) -> Vec<(RgbImage, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = i % NUM_PATTERNS;
            (pattern_image(class, size, &mut rng), class)
        })
        .collect()
}

/// Writes a corpus as PNGs: flat when `labeled` is false, otherwise one
/// `class_NN/` directory per pattern.
pub fn write_corpus(dir: &Path, n: usize, size: u32, labeled: bool, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LmdError::io(dir, e))?;
    for (i, (img, class)) in corpus(n, size, seed).into_iter().enumerate() {
        let parent = if labeled {
            let p = dir.join(format!("class_{class:02}"));
            std::fs::create_dir_all(&p).map_err(|e| LmdError::io(&p, e))?;
            p
        } else {
            dir.to_path_buf()
        };
        let path = parent.join(format!("img_{i:05}.png"));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| LmdError::Image { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded() {
        let a = corpus(12, 16, 4);
        let b = corpus(12, 16, 4);
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1));
        assert_ne!(a[0].0, corpus(1, 16, 5)[0].0);
        assert_eq!(a[11].1, 1);
    }
}
