//! Seeded generator of object/cast-shadow scenes.
//!
//! Each scene has a bright, softly graded background, one object (ellipse or
//! rectangle) and the shadow that object casts: the object swept along a
//! random direction, darkened background colour, with the object itself
//! drawn on top. The mask marks shadow pixels only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Category, ShadowSample};
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.02;
/// Minimum background-free gap, in pixels, around a non-adjacent object.
pub const GAP: usize = 2;
const AMBIGUITY_MARGIN: f64 = 0.03;
const MAX_ATTEMPTS: usize = 200;

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse,
    Rect,
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Object {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        match self.shape {
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
            Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }
}

/// A rendered sample together with its occluder footprint.
#[derive(Debug, Clone)]
pub struct Scene {
    pub sample: ShadowSample,
    /// Row-major object pixels.
    pub object: Vec<bool>,
}

fn dilate(mask: &[bool], size: usize, radius: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for _ in 0..radius {
        let prev = out.clone();
        for y in 0..size {
            for x in 0..size {
                if prev[y * size + x] {
                    continue;
                }
                let hit = (y > 0 && prev[(y - 1) * size + x])
                    || (y + 1 < size && prev[(y + 1) * size + x])
                    || (x > 0 && prev[y * size + x - 1])
                    || (x + 1 < size && prev[y * size + x + 1]);
                out[y * size + x] = hit;
            }
        }
    }
    out
}

fn sweep(obj: &Object, size: usize, dir: (f64, f64), from: f64, to: f64) -> Vec<bool> {
    let mut out = vec![false; size * size];
    let mut t = from;
    while t <= to {
        let (oy, ox) = (t * dir.0, t * dir.1);
        for y in 0..size {
            for x in 0..size {
                if !out[y * size + x] && obj.contains(y as f64 + 0.5 - oy, x as f64 + 0.5 - ox) {
                    out[y * size + x] = true;
                }
            }
        }
        t += 0.5;
    }
    out
}

fn try_render(rng: &mut ChaCha8Rng, category: Category, size: usize, noise: &Normal<f64>) -> Option<Scene> {
    let s = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.95));
    let grad: (f64, f64) = (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08));
    let obj = Object {
        shape: if rng.gen_bool(0.5) { Shape::Ellipse } else { Shape::Rect },
        cy: rng.gen_range(0.25 * s..0.75 * s),
        cx: rng.gen_range(0.25 * s..0.75 * s),
        ry: rng.gen_range(0.08 * s..0.18 * s),
        rx: rng.gen_range(0.08 * s..0.18 * s),
    };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = (angle.sin(), angle.cos());
    let length = rng.gen_range(0.15 * s..0.30 * s);
    let darkening = rng.gen_range(0.35..0.55);

    let object: Vec<bool> = (0..size * size)
        .map(|i| obj.contains((i / size) as f64 + 0.5, (i % size) as f64 + 0.5))
        .collect();
    let n_object = object.iter().filter(|&&b| b).count();
    if n_object == 0 {
        return None;
    }
    let shadow: Vec<bool> = if category == Category::NonAdjacent {
        let keep_out = dilate(&object, size, GAP + 1);
        let mut start = 0.0;
        let limit = 2.0 * s;
        loop {
            let moved = sweep(&obj, size, dir, start, start);
            if !moved.iter().zip(&keep_out).any(|(&a, &b)| a && b) {
                break;
            }
            start += 0.5;
            if start > limit {
                return None;
            }
        }
        sweep(&obj, size, dir, start, start + length)
            .iter()
            .zip(&keep_out)
            .map(|(&a, &b)| a && !b)
            .collect()
    } else {
        sweep(&obj, size, dir, 0.0, length)
            .iter()
            .zip(&object)
            .map(|(&a, &b)| a && !b)
            .collect()
    };
    let n_shadow = shadow.iter().filter(|&&b| b).count();
    if n_shadow < size * size / 50 {
        return None;
    }

    let background = |y: usize, x: usize| -> [f64; 3] {
        let off = grad.0 * (y as f64 / s - 0.5) + grad.1 * (x as f64 / s - 0.5);
        base.map(|c| (c + off).clamp(0.0, 1.0))
    };
    let mut shadow_lum = 0.0;
    let mut shadow_rgb = [0.0; 3];
    for i in (0..size * size).filter(|&i| shadow[i]) {
        let c = background(i / size, i % size).map(|v| v * darkening);
        shadow_lum += luminance(c);
        for k in 0..3 {
            shadow_rgb[k] += c[k];
        }
    }
    shadow_lum /= n_shadow as f64;
    let shadow_rgb = shadow_rgb.map(|v| v / n_shadow as f64);

    let object_rgb: [f64; 3] = if category == Category::AmbiguousAdjacent {
        let u = rng.gen_range(0.4..0.85);
        shadow_rgb.map(|c| (c * u + rng.gen_range(-0.03..0.03)).clamp(0.02, 1.0))
    } else {
        let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..1.0));
        if luminance(c) < shadow_lum + 0.2 {
            return None;
        }
        c
    };

    let mut image = vec![0.0; 3 * size * size];
    let mut mask = vec![0.0; size * size];
    for i in 0..size * size {
        let (y, x) = (i / size, i % size);
        let rgb = if object[i] {
            object_rgb
        } else if shadow[i] {
            mask[i] = 1.0;
            background(y, x).map(|v| v * darkening)
        } else {
            background(y, x)
        };
        for k in 0..3 {
            image[k * size * size + i] = (rgb[k] + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }

    if category == Category::AmbiguousAdjacent {
        let mean_lum = |sel: &dyn Fn(usize) -> bool| {
            let idx: Vec<usize> = (0..size * size).filter(|&i| sel(i)).collect();
            let sum: f64 = idx
                .iter()
                .map(|&i| luminance(std::array::from_fn(|k| image[k * size * size + i])))
                .sum();
            sum / idx.len() as f64
        };
        if mean_lum(&|i| object[i]) > mean_lum(&|i| shadow[i]) - AMBIGUITY_MARGIN {
            return None;
        }
    }

    let sample = ShadowSample::new(
        Tensor::new([3, size, size], image).ok()?,
        Tensor::new([1, size, size], mask).ok()?,
        Some(category),
        "",
    )
    .ok()?;
    Some(Scene { sample, object })
}

/// Like [`synth_sample`], keeping the object footprint.
pub fn render(seed: u64, category: Category, img_size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for _ in 0..MAX_ATTEMPTS {
        if let Some(scene) = try_render(&mut rng, category, img_size, &noise) {
            return scene;
        }
    }
    panic!("no valid {category} scene of size {img_size} after {MAX_ATTEMPTS} attempts");
}

/// One scene of `category`; identical for identical arguments.
///
/// # Panics
///
/// When `img_size` is too small to place an object and its shadow
/// (below roughly 16 pixels).
pub fn synth_sample(seed: u64, category: Category, img_size: usize) -> ShadowSample {
    render(seed, category, img_size).sample
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Samples `first..first + n` of the stream for `seed`, cycling through the
/// three categories so each makes up a third of the set.
pub fn synth_dataset(seed: u64, first: usize, n: usize, img_size: usize) -> Vec<ShadowSample> {
    (first..first + n)
        .map(|i| {
            let cat = Category::ALL[i % 3];
            let mut s = synth_sample(sample_seed(seed, i), cat, img_size);
            s.name = format!("{i:05}");
            s
        })
        .collect()
}

/// Disjoint training and test sets drawn from one stream.
pub fn synth_split(seed: u64, n_train: usize, n_test: usize, img_size: usize) -> (Vec<ShadowSample>, Vec<ShadowSample>) {
    (
        synth_dataset(seed, 0, n_train, img_size),
        synth_dataset(seed, n_train, n_test, img_size),
    )
}
