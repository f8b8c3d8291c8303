//! Deterministic procedural images.
//!
//! Segmentation images are a flat random-colour background with one ellipse
//! or rectangle in a second colour plus mild pixel noise. The tri-map marks
//! pixels whose 3×3 neighbourhood straddles the shape boundary as unknown,
//! which gives a two pixel wide band. Unlabeled images come from the same
//! generator. Classification images are six texture families assigned
//! round-robin.

use std::f32::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetKind, Label, Sample};
use crate::objectives::{Trimap, BACKGROUND, FOREGROUND, NUM_SCENE_CLASSES, UNKNOWN};

const NOISE: f32 = 0.04;

/// `n` samples of `kind`; sample `i` depends only on `(seed, i)`.
pub fn synth_generate(kind: DatasetKind, n: usize, seed: u64, image_size: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            match kind {
                DatasetKind::Segmentation => {
                    let (image, trimap) = shape_scene(&mut rng, image_size);
                    Sample {
                        image,
                        label: Label::Trimap(trimap),
                    }
                }
                DatasetKind::Unlabeled => Sample {
                    image: shape_scene(&mut rng, image_size).0,
                    label: Label::None,
                },
                DatasetKind::Classification => {
                    let class = i % NUM_SCENE_CLASSES;
                    Sample {
                        image: texture(&mut rng, class, image_size),
                        label: Label::Class(class),
                    }
                }
            }
        })
        .collect()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn distinct_colors(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3]) {
    loop {
        let (a, b) = (random_color(rng), random_color(rng));
        let dist: f32 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        if dist > 0.6 {
            return (a, b);
        }
    }
}

fn shape_scene(rng: &mut ChaCha8Rng, size: usize) -> (Array3<f32>, Trimap) {
    loop {
        let (bg, fg) = distinct_colors(rng);
        let s = size as f32;
        let cx = rng.random_range(0.3..0.7) * s;
        let cy = rng.random_range(0.3..0.7) * s;
        let rx = rng.random_range(0.15..0.35) * s;
        let ry = rng.random_range(0.15..0.35) * s;
        let ellipse = rng.random_bool(0.5);
        let inside = Array2::from_shape_fn((size, size), |(y, x)| {
            let dx = (x as f32 + 0.5 - cx) / rx;
            let dy = (y as f32 + 0.5 - cy) / ry;
            if ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            }
        });
        let labels = Array2::from_shape_fn((size, size), |(y, x)| {
            let here = inside[[y, x]];
            let y0 = y.saturating_sub(1);
            let x0 = x.saturating_sub(1);
            let straddles =
                (y0..=(y + 1).min(size - 1)).any(|yy| (x0..=(x + 1).min(size - 1)).any(|xx| inside[[yy, xx]] != here));
            if straddles {
                UNKNOWN
            } else if here {
                FOREGROUND
            } else {
                BACKGROUND
            }
        });
        let trimap = Trimap::new(labels).expect("labels are in range");
        if !trimap.classes_present().iter().all(|&p| p) {
            continue;
        }
        let image = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            let base = if inside[[y, x]] { fg[c] } else { bg[c] };
            (base + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0)
        });
        return (image, trimap);
    }
}

fn texture(rng: &mut ChaCha8Rng, class: usize, size: usize) -> Array3<f32> {
    let (a, b) = distinct_colors(rng);
    let s = size as f32;
    let freq = rng.random_range(3.0..6.0) * 2.0 * PI / s;
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
    let blobs: Vec<(f32, f32, f32)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.05..0.12) * s,
            )
        })
        .collect();
    let mix = Array2::from_shape_fn((size, size), |(y, x)| {
        let (xf, yf) = (x as f32, y as f32);
        match class {
            0 => (0.5 + 0.5 * (freq * yf + phase).sin()).round(),
            1 => (0.5 + 0.5 * (freq * xf + phase).sin()).round(),
            2 => (0.5 + 0.5 * (freq * (xf + yf) / 2f32.sqrt() + phase).sin()).round(),
            3 => {
                let cell = (PI / freq).max(2.0);
                (((xf / cell).floor() + (yf / cell).floor()) as i64 % 2) as f32
            }
            4 => {
                let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                (0.5 + 0.5 * (freq * r + phase).sin()).round()
            }
            _ => {
                let hit = blobs
                    .iter()
                    .any(|&(bx, by, br)| (xf - bx).powi(2) + (yf - by).powi(2) <= br * br);
                hit as u8 as f32
            }
        }
    });
    Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let m = mix[[y, x]];
        (a[c] * (1.0 - m) + b[c] * m + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0)
    })
}
