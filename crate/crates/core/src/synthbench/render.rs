use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mask, RgbImage, PIXELS, SIDE};
use crate::error::{Error, Result};

/// Concepts that can fill the scene background.
pub const BACKGROUND_CONCEPTS: [&str; 4] = ["grass", "sand", "water", "sky"];
/// Concepts attached to the foreground object.
pub const PART_CONCEPTS: [&str; 1] = ["wheel"];

const FOREGROUND_PALETTE: [[i32; 3]; 5] =
    [[205, 45, 40], [235, 125, 30], [190, 45, 165], [115, 55, 175], [225, 205, 45]];

/// Which concepts a scene carries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub background: String,
    pub parts: Vec<String>,
}

fn clamp8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Pixel test for the class-defining shape centred at the origin.
fn in_shape(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let dist = (dx * dx + dy * dy).sqrt();
    match class % 8 {
        0 => dist <= r,
        1 => ax.max(ay) <= 0.8 * r,
        2 => dy >= -r && dy <= 0.8 * r && ax <= (dy + r) * 0.55,
        3 => dist <= r && dist >= 0.55 * r,
        4 => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
        5 => ax + ay <= r,
        6 => ax <= r && ((ay - 0.5 * r).abs() <= 0.22 * r || (dy + 0.5 * r).abs() <= 0.22 * r && dy < 0.0),
        _ => ax <= 0.85 * r && ay <= 0.85 * r && ((dx - dy).abs() <= 0.3 * r || (dx + dy).abs() <= 0.3 * r),
    }
}

fn background_pixel(
    concept: &str,
    row: usize,
    col: usize,
    rng: &mut ChaCha8Rng,
    phase: f64,
    jitter: [f64; 3],
) -> Result<[u8; 3]> {
    let (y, x) = (row as f64, col as f64);
    let n = rng.random_range(-1.0..1.0);
    let rgb = match concept {
        "grass" => {
            let blade = (x * 1.7 + phase).sin() * 0.5 + (y * 0.35 + x * 0.2).sin() * 0.3;
            [60.0 + 18.0 * blade + 14.0 * n, 140.0 + 30.0 * blade + 18.0 * n, 50.0 + 10.0 * blade + 10.0 * n]
        }
        "sand" => [200.0 + 22.0 * n, 180.0 + 20.0 * n, 122.0 + 16.0 * n],
        "water" => {
            let wave = (0.8 * y + 0.6 * (0.5 * x + phase).sin()).sin();
            [40.0 + 10.0 * wave + 6.0 * n, 92.0 + 22.0 * wave + 8.0 * n, 172.0 + 28.0 * wave + 8.0 * n]
        }
        "sky" => {
            let t = y / (SIDE as f64 - 1.0);
            [120.0 + 70.0 * t + 5.0 * n, 170.0 + 45.0 * t + 5.0 * n, 230.0 + 15.0 * t + 4.0 * n]
        }
        other => return Err(Error::Config(format!("unknown background concept '{other}'"))),
    };
    Ok([clamp8(rgb[0] + jitter[0]), clamp8(rgb[1] + jitter[1]), clamp8(rgb[2] + jitter[2])])
}

/// Rendered scene with one exact mask per concept in the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub masks: BTreeMap<String, Mask>,
    pub label: usize,
}

/// Renders the shape of `class` over the layout's background concept, plus
/// any part concepts. Background and part masks are disjoint, and neither
/// covers shape pixels. The scene is a pure function of its arguments.
pub fn render_scene(class: usize, layout: &SceneLayout, seed: u64, noise: f64) -> Result<Scene> {
    if !BACKGROUND_CONCEPTS.contains(&layout.background.as_str()) {
        return Err(Error::Config(format!("unknown background concept '{}'", layout.background)));
    }
    for p in &layout.parts {
        if !PART_CONCEPTS.contains(&p.as_str()) {
            return Err(Error::Config(format!("unknown part concept '{p}'")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: f64 = rng.random_range(7.0..10.0);
    let cy: f64 = rng.random_range(12.0..20.0);
    let cx: f64 = rng.random_range(12.0..20.0);
    let base = FOREGROUND_PALETTE[rng.random_range(0..FOREGROUND_PALETTE.len())];
    let fg: [f64; 3] = std::array::from_fn(|c| f64::from(base[c]) + rng.random_range(-20.0..20.0));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-12.0..12.0));

    let mut image = RgbImage::blank();
    let mut shape = Mask::empty();
    let mut bg = Mask::empty();
    for p in 0..PIXELS {
        let (row, col) = (p / SIDE, p % SIDE);
        let (dy, dx) = (row as f64 - cy, col as f64 - cx);
        if in_shape(class, dx, dy, r) {
            shape.set(p, true);
            let rgb = fg.map(|v| clamp8(v + noise * rng.random_range(-1.0..1.0)));
            image.set(p, rgb);
        } else {
            bg.set(p, true);
            let rgb = background_pixel(&layout.background, row, col, &mut rng, phase, jitter)?;
            let rgb = rgb.map(|v| clamp8(f64::from(v) + noise * rng.random_range(-1.0..1.0)));
            image.set(p, rgb);
        }
    }

    let mut masks = BTreeMap::new();
    for part in &layout.parts {
        // a wheel: small disc straddling the bottom edge of the object
        let (py, px) = ((cy + 0.85 * r).min(SIDE as f64 - 3.0), cx);
        let mut m = Mask::empty();
        for p in 0..PIXELS {
            let (row, col) = ((p / SIDE) as f64, (p % SIDE) as f64);
            let d = ((row - py).powi(2) + (col - px).powi(2)).sqrt();
            if d <= 3.2 {
                m.set(p, true);
                shape.set(p, false);
                bg.set(p, false);
                let shade = if d <= 1.5 { 95.0 } else { 35.0 };
                let v = clamp8(shade + noise * rng.random_range(-1.0..1.0));
                image.set(p, [v, v, v]);
            }
        }
        masks.insert(part.clone(), m);
    }
    masks.insert(layout.background.clone(), bg);
    Ok(Scene { image, masks, label: class })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(bg: &str, parts: &[&str]) -> SceneLayout {
        SceneLayout { background: bg.into(), parts: parts.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn full_background_is_complement_of_shape() {
        for class in 0..8 {
            let s = render_scene(class, &layout("grass", &[]), 17 + class as u64, 8.0).unwrap();
            let bg = &s.masks["grass"];
            // shape pixels carry no concept
            let shape_px = PIXELS - bg.count();
            assert!(shape_px > 20, "class {class} shape too small: {shape_px}");
            assert_eq!(bg.count(), 32 * 32 - shape_px);
        }
    }

    #[test]
    fn masks_are_disjoint() {
        let s = render_scene(3, &layout("water", &["wheel"]), 5, 8.0).unwrap();
        let (a, b) = (&s.masks["water"], &s.masks["wheel"]);
        assert!((0..PIXELS).all(|p| !(a.contains(p) && b.contains(p))));
        assert!(b.count() >= crate::synthbench::MIN_CONCEPT_PIXELS);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let l = layout("sand", &["wheel"]);
        assert_eq!(render_scene(2, &l, 9, 8.0).unwrap(), render_scene(2, &l, 9, 8.0).unwrap());
        assert_ne!(render_scene(2, &l, 9, 8.0).unwrap().image, render_scene(2, &l, 10, 8.0).unwrap().image);
    }

    #[test]
    fn unknown_concepts_rejected() {
        assert!(render_scene(0, &layout("lava", &[]), 1, 0.0).is_err());
        assert!(render_scene(0, &layout("sky", &["tail"]), 1, 0.0).is_err());
    }
}
