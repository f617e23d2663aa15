//! Deterministic synthetic flood scenes.
//!
//! Each scene is a 4-band (R, G, B, NIR) raster plus a binary label. Water
//! bodies come from thresholded smooth value noise at a per-scene target
//! fraction, so scenes always contain a plausible amount of water. The
//! spectral construction mirrors the physical contrast that makes flood
//! mapping work: water absorbs near-infrared (NIR ~ 0.05) while land
//! reflects it strongly (~ 0.40), whereas the visible palette of both
//! classes is drawn per scene from wide overlapping ranges (turbidity,
//! soil, vegetation) and so carries no scene-invariant rule. A random
//! minority of scenes get a low-frequency haze field (brightening RGB much
//! more than NIR) or a nodata border strip in the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Raster, ScenePair, LABEL_BAND, PATCH};
use crate::error::{Error, Result};
use crate::loss::NODATA_LABEL;

pub const WATER_NIR_MEAN: f64 = 0.05;
pub const WATER_NIR_STD: f64 = 0.02;
pub const LAND_NIR_MEAN: f64 = 0.40;
pub const LAND_NIR_STD: f64 = 0.10;
pub const RGB_NOISE_STD: f64 = 0.03;
/// Per-scene palette ranges, [low, high] per channel. Land spans dark soil
/// through bright sand and lush vegetation; water spans clear-dark through
/// bright turbid. The ranges overlap heavily on purpose: within any one scene
/// RGB tracks the water mask, but no fixed RGB rule holds across scenes —
/// only NIR keeps a constant contrast, which is the asymmetry that makes the
/// near-infrared band the reliable signal for inundation.
pub const LAND_RGB_RANGE: [[f64; 2]; 3] = [[0.06, 0.50], [0.08, 0.50], [0.04, 0.45]];
/// Water green is bounded below so the scene-mean water index stays higher
/// over water than over land (water NIR ≈ 0.05 vs land NIR ≈ 0.40 keeps the
/// margin comfortable for any draw in these ranges).
pub const WATER_RGB_RANGE: [[f64; 2]; 3] = [[0.04, 0.45], [0.10, 0.40], [0.06, 0.45]];
pub const HAZE_PROBABILITY: f64 = 0.3;
/// Haze brightens optical bands strongly but barely touches NIR, which is
/// what keeps the NIR stream informative on hazy scenes.
pub const HAZE_RGB_GAIN: f64 = 0.20;
pub const HAZE_NIR_GAIN: f64 = 0.06;
pub const BORDER_PROBABILITY: f64 = 0.1;

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth value noise in [0,1]: random values on a coarse grid, bilinearly
/// interpolated with a smoothstep fade.
fn value_noise(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: usize) -> Vec<f64> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen()).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = y / cell;
        let ty = smoothstep((y % cell) as f64 / cell as f64);
        for x in 0..width {
            let gx = x / cell;
            let tx = smoothstep((x % cell) as f64 / cell as f64);
            let v00 = grid[gy * gw + gx];
            let v01 = grid[gy * gw + gx + 1];
            let v10 = grid[(gy + 1) * gw + gx];
            let v11 = grid[(gy + 1) * gw + gx + 1];
            let top = v00 + (v01 - v00) * tx;
            let bottom = v10 + (v11 - v10) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

/// Generate one scene. Dimensions must be even and at least one patch.
pub fn synth_scene(seed: u64, width: usize, height: usize) -> Result<ScenePair> {
    if width < PATCH || height < PATCH {
        return Err(Error::InvalidConfig(format!(
            "scene {width}x{height} is smaller than the {PATCH}x{PATCH} patch"
        )));
    }
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "scene dims {width}x{height} must be even"
        )));
    }
    let n = width * height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let water_frac = rng.gen_range(0.1..0.4);
    let coarse = value_noise(&mut rng, width, height, 64);
    let fine = value_noise(&mut rng, width, height, 32);
    let field: Vec<f64> = coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| 0.65 * c + 0.35 * f)
        .collect();

    // Pick the nodata strip before thresholding so the water fraction over
    // the *valid* pixels hits the target regardless of where the strip lands.
    let mut in_strip = vec![false; n];
    if rng.gen_bool(BORDER_PROBABILITY) {
        let side = rng.gen_range(0..4u32);
        let strip = rng.gen_range(8..=24usize);
        for y in 0..height {
            for x in 0..width {
                let hit = match side {
                    0 => y < strip,
                    1 => y >= height - strip,
                    2 => x < strip,
                    _ => x >= width - strip,
                };
                if hit {
                    in_strip[y * width + x] = true;
                }
            }
        }
    }

    // Threshold at the (1 - water_frac) quantile of the valid pixels.
    let mut valid_values: Vec<f64> = field
        .iter()
        .zip(&in_strip)
        .filter(|(_, &s)| !s)
        .map(|(&v, _)| v)
        .collect();
    valid_values.sort_by(|a, b| a.partial_cmp(b).expect("noise is finite"));
    let idx = (((1.0 - water_frac) * valid_values.len() as f64) as usize)
        .min(valid_values.len() - 1);
    let threshold = valid_values[idx];
    let water: Vec<bool> = field.iter().map(|&v| v >= threshold).collect();

    let water_nir = Normal::new(WATER_NIR_MEAN, WATER_NIR_STD).expect("positive std");
    let land_nir = Normal::new(LAND_NIR_MEAN, LAND_NIR_STD).expect("positive std");
    let mut nir: Vec<f64> = Vec::with_capacity(n);
    for &w in &water {
        let dist = if w { water_nir } else { land_nir };
        nir.push(dist.sample(&mut rng));
    }

    let mut land_base = [0.0f64; 3];
    let mut water_base = [0.0f64; 3];
    for c in 0..3 {
        land_base[c] = rng.gen_range(LAND_RGB_RANGE[c][0]..LAND_RGB_RANGE[c][1]);
        water_base[c] = rng.gen_range(WATER_RGB_RANGE[c][0]..WATER_RGB_RANGE[c][1]);
    }
    let rgb_noise = Normal::new(0.0, RGB_NOISE_STD).expect("positive std");
    let mut rgb: [Vec<f64>; 3] = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for &w in &water {
        let base = if w { &water_base } else { &land_base };
        for (plane, &b) in rgb.iter_mut().zip(base) {
            plane.push(b + rgb_noise.sample(&mut rng));
        }
    }

    if rng.gen_bool(HAZE_PROBABILITY) {
        let haze = value_noise(&mut rng, width, height, 128);
        for (i, &h) in haze.iter().enumerate() {
            for plane in &mut rgb {
                plane[i] += HAZE_RGB_GAIN * h;
            }
            nir[i] += HAZE_NIR_GAIN * h;
        }
    }

    let clamp = |v: f64| v.clamp(0.0, 1.0) as f32;
    let mut image = Vec::with_capacity(4 * n);
    for plane in &rgb {
        image.extend(plane.iter().map(|&v| clamp(v)));
    }
    image.extend(nir.iter().map(|&v| clamp(v)));

    let label: Vec<f32> = water
        .iter()
        .zip(&in_strip)
        .map(|(&w, &s)| {
            if s {
                NODATA_LABEL as f32
            } else if w {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    Ok(ScenePair {
        image: Raster::new(
            width as u32,
            height as u32,
            ["R", "G", "B", "NIR"].map(String::from).to_vec(),
            image,
        )?,
        label: Raster::new(width as u32, height as u32, vec![LABEL_BAND.into()], label)?,
    })
}
