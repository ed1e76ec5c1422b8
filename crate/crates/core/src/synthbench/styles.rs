use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mask, RgbImage, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

pub const STYLE_FAMILIES: [&str; 8] =
    ["black_and_white", "floral", "fall_colors", "furry", "graffiti", "gravel", "snow", "wooden"];
pub const VARIANTS_PER_FAMILY: usize = 3;

/// What replaces the pixels of a transformed concept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StyleVariant {
    /// A full-frame texture, looked up at the same coordinates.
    Texture(RgbImage),
    /// Texture equal to the source pixels; transforms nothing.
    Identity,
}

/// Named texture families with exactly three variants each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StyleBank {
    pub seed: u64,
    families: Vec<(String, Vec<StyleVariant>)>,
}

impl StyleBank {
    pub fn families(&self) -> impl Iterator<Item = &str> {
        self.families.iter().map(|(n, _)| n.as_str())
    }

    pub fn variant(&self, family: &str, index: usize) -> Result<&StyleVariant> {
        let (_, vs) = self
            .families
            .iter()
            .find(|(n, _)| n == family)
            .ok_or_else(|| Error::Config(format!("unknown style family '{family}'")))?;
        vs.get(index).ok_or_else(|| Error::Config(format!("style {family} has no variant {index}")))
    }

    pub fn contains(&self, family: &str) -> bool {
        self.families.iter().any(|(n, _)| n == family)
    }
}

/// Bilinearly interpolated lattice noise in `[0, 1)`.
struct ValueNoise {
    cell: f64,
    n: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = (SIDE as f64 / cell).ceil() as usize + 2;
        Self { cell, n, grid: (0..n * n).map(|_| rng.random::<f64>()).collect() }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (gy, gx) = (y / self.cell, x / self.cell);
        let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let g = |a: usize, b: usize| self.grid[a.min(self.n - 1) * self.n + b.min(self.n - 1)];
        let top = g(iy, ix) * (1.0 - fx) + g(iy, ix + 1) * fx;
        let bot = g(iy + 1, ix) * (1.0 - fx) + g(iy + 1, ix + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn px(v: [f64; 3]) -> [u8; 3] {
    v.map(|c| c.round().clamp(0.0, 255.0) as u8)
}

fn texture(family: &str, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::blank();
    match family {
        "black_and_white" => {
            let noise = ValueNoise::new(rng.random_range(3.0..6.0), rng);
            let cut = rng.random_range(0.4..0.6);
            for p in 0..PIXELS {
                let v = noise.at((p / SIDE) as f64, (p % SIDE) as f64);
                let g = if v > cut { 235.0 } else { 25.0 } + rng.random_range(-10.0..10.0);
                img.set(p, px([g, g, g]));
            }
        }
        "floral" => {
            let flowers: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(10..16))
                .map(|_| {
                    let color =
                        [[235.0, 120.0, 170.0], [215.0, 40.0, 60.0], [245.0, 240.0, 235.0]][rng.random_range(0..3)];
                    (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(1.8..3.2), color)
                })
                .collect();
            for p in 0..PIXELS {
                let (y, x) = ((p / SIDE) as f64, (p % SIDE) as f64);
                let mut c = [70.0, 120.0, 60.0].map(|v| v + rng.random_range(-12.0..12.0));
                for &(fy, fx, r, col) in &flowers {
                    let d = ((y - fy).powi(2) + (x - fx).powi(2)).sqrt();
                    if d <= r {
                        c = if d < 0.8 { [240.0, 210.0, 40.0] } else { col };
                    }
                }
                img.set(p, px(c));
            }
        }
        "fall_colors" => {
            let noise = ValueNoise::new(rng.random_range(2.5..5.0), rng);
            let palette = [[220.0, 120.0, 30.0], [180.0, 40.0, 30.0], [120.0, 70.0, 30.0], [220.0, 180.0, 50.0]];
            let shift = rng.random_range(0..4);
            for p in 0..PIXELS {
                let v = noise.at((p / SIDE) as f64, (p % SIDE) as f64);
                let k = ((v * 4.0) as usize + shift) % 4;
                img.set(p, px(palette[k].map(|c| c + rng.random_range(-15.0..15.0))));
            }
        }
        "furry" => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let noise = ValueNoise::new(1.5, rng);
            let base = [rng.random_range(120.0..160.0), rng.random_range(85.0..110.0), 60.0];
            for p in 0..PIXELS {
                let (y, x) = ((p / SIDE) as f64, (p % SIDE) as f64);
                // stretch the noise along the fur direction
                let u = x * angle.cos() + y * angle.sin();
                let w = -x * angle.sin() + y * angle.cos();
                let v = noise.at((u / 4.0 + 16.0).max(0.0), (w + 16.0).rem_euclid(30.0));
                img.set(p, px(base.map(|c| c + 70.0 * (v - 0.5))));
            }
        }
        "graffiti" => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let width = rng.random_range(2.5..5.0);
            let colors: Vec<[f64; 3]> = (0..5)
                .map(|_| {
                    let mut c = [0.0; 3];
                    c[rng.random_range(0..3)] = 250.0;
                    c[rng.random_range(0..3)] = rng.random_range(0.0..250.0);
                    c
                })
                .collect();
            for p in 0..PIXELS {
                let (y, x) = ((p / SIDE) as f64, (p % SIDE) as f64);
                let u = x * angle.cos() + y * angle.sin() + 64.0;
                let k = (u / width) as usize % colors.len();
                img.set(p, px(colors[k].map(|c| c + rng.random_range(-8.0..8.0))));
            }
        }
        "gravel" => {
            let noise = ValueNoise::new(rng.random_range(1.5..3.0), rng);
            let tint = rng.random_range(-10.0..10.0);
            for p in 0..PIXELS {
                let v = noise.at((p / SIDE) as f64, (p % SIDE) as f64);
                let g = 80.0 + 110.0 * v + rng.random_range(-15.0..15.0);
                img.set(p, px([g + tint, g, g - tint]));
            }
        }
        "snow" => {
            let noise = ValueNoise::new(rng.random_range(3.0..7.0), rng);
            let speckle = rng.random_range(0.03..0.08);
            for p in 0..PIXELS {
                let v = noise.at((p / SIDE) as f64, (p % SIDE) as f64);
                let shade = 215.0 + 35.0 * v;
                let mut c = [shade, shade + 4.0, shade + 10.0].map(|c| c + rng.random_range(-6.0..6.0));
                if rng.random::<f64>() < speckle {
                    c = [150.0, 160.0, 175.0];
                }
                img.set(p, px(c));
            }
        }
        _ => {
            // wooden
            let angle: f64 =
                rng.random_range(-0.4..0.4) + std::f64::consts::FRAC_PI_2 * f64::from(rng.random_range(0..2));
            let freq = rng.random_range(0.6..1.3);
            let noise = ValueNoise::new(4.0, rng);
            for p in 0..PIXELS {
                let (y, x) = ((p / SIDE) as f64, (p % SIDE) as f64);
                let u = x * angle.cos() + y * angle.sin();
                let grain = (freq * u + 4.0 * noise.at(y, x)).sin();
                img.set(p, px([150.0 + 40.0 * grain, 95.0 + 28.0 * grain, 50.0 + 15.0 * grain]));
            }
        }
    }
    img
}

/// Eight texture families, three variants each; variant `(f, i)` depends
/// only on `(seed, f, i)`.
pub fn gen_texture_bank(seed: u64) -> StyleBank {
    let families = STYLE_FAMILIES
        .iter()
        .map(|&f| {
            let vs = (0..VARIANTS_PER_FAMILY)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["style", f, &i.to_string()]));
                    StyleVariant::Texture(texture(f, &mut rng))
                })
                .collect();
            (f.to_string(), vs)
        })
        .collect();
    StyleBank { seed, families }
}

/// Replaces the pixels under `mask` with the variant's texture at the same
/// coordinates; every other byte is copied unchanged.
pub fn transform_concept(image: &RgbImage, mask: &Mask, variant: &StyleVariant) -> Result<RgbImage> {
    if mask.is_empty() {
        return Err(Error::Empty("concept mask".into()));
    }
    let tex = match variant {
        StyleVariant::Identity => return Ok(image.clone()),
        StyleVariant::Texture(t) => t,
    };
    let mut out = image.clone();
    for p in 0..PIXELS {
        if mask.contains(p) {
            out.set(p, [tex.get(0, p), tex.get(1, p), tex.get(2, p)]);
        }
    }
    Ok(out)
}
