//! Procedural day/night scenes.
//!
//! A scene is a background (class 0) crossed by full-span bars of classes
//! `1..K`, all snapped to the 8-pixel feature grid and sharing one orientation per
//! scene. Each class has its own palette and texture. Night scenes reuse the day
//! geometry and apply a smooth multiplicative gain field with clipping, then
//! additive Gaussian noise.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LabelMap;
use crate::tensor::Tensor;

use super::config::OUTPUT_STRIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Day,
    Night,
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Day => "day",
            Style::Night => "night",
        })
    }
}

impl FromStr for Style {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Style::Day),
            "night" => Ok(Style::Night),
            _ => Err(Error::Config(format!("unknown style `{s}` (expected day or night)"))),
        }
    }
}

pub const GAIN_MIN: f64 = 0.1;
pub const GAIN_MAX: f64 = 2.5;
pub const NIGHT_NOISE_SIGMA: f64 = 0.02;
const TEXTURE_AMPLITUDE: f64 = 0.12;
const COLOR_JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    /// `[H, W]` gain applied before clipping; `None` for day scenes.
    pub gain: Option<Tensor>,
}

/// Which scenes to generate: indices `start..start + count` under `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub style: Style,
    pub seed: u64,
    pub count: usize,
    pub start: usize,
}

impl DataSpec {
    /// The `count` scenes that directly follow this set.
    pub fn following(&self, count: usize) -> Self {
        Self { start: self.start + self.count, count, ..*self }
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.style, self.seed, self.count, self.start)
    }
}

impl FromStr for DataSpec {
    type Err = Error;

    /// `style:seed:count[:start]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad data spec `{s}` (expected style:seed:count[:start])"));
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let style = parts[0].parse()?;
        let seed = parts[1].parse().map_err(|_| bad())?;
        let count = parts[2].parse().map_err(|_| bad())?;
        let start = parts.get(3).map_or(Ok(0), |p| p.parse()).map_err(|_| bad())?;
        if count == 0 {
            return Err(Error::Config(format!("data spec `{s}` selects no scenes")));
        }
        Ok(Self { style, seed, count, start })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for `(seed, index, stream)`.
pub fn scene_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed) ^ index as u64) ^ stream);
    ChaCha8Rng::seed_from_u64(s)
}

const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.70, 0.25, 0.25],
    [0.25, 0.65, 0.30],
    [0.25, 0.35, 0.75],
    [0.70, 0.65, 0.25],
    [0.60, 0.30, 0.65],
    [0.25, 0.65, 0.70],
    [0.70, 0.50, 0.30],
];

fn texture(class: usize, y: usize, x: usize) -> f64 {
    let on = match class % 4 {
        0 => return 0.0,
        1 => (x / 2).is_multiple_of(2),
        2 => (y / 2).is_multiple_of(2),
        _ => ((x / 2) + (y / 2)).is_multiple_of(2),
    };
    if on {
        TEXTURE_AMPLITUDE
    } else {
        -TEXTURE_AMPLITUDE
    }
}

fn layout(size: usize, classes: usize, rng: &mut ChaCha8Rng) -> (LabelMap, bool) {
    let cells = size / OUTPUT_STRIDE;
    let vertical = rng.gen_bool(0.5);
    let mut line = vec![0u8; cells];
    for class in 1..classes {
        let bars = rng.gen_range(1..=2);
        for _ in 0..bars {
            let width = rng.gen_range(1..=(cells / 3).max(1));
            let start = rng.gen_range(0..=cells - width);
            line[start..start + width].fill(class as u8);
        }
    }
    let data = (0..size * size)
        .map(|p| {
            let along = if vertical { p % size } else { p / size };
            line[along / OUTPUT_STRIDE]
        })
        .collect();
    (LabelMap { height: size, width: size, data }, vertical)
}

fn day_image(labels: &LabelMap, classes: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let size = labels.width;
    let colors: Vec<[f64; 3]> = (0..classes)
        .map(|c| {
            let base = PALETTE[c % PALETTE.len()];
            [0, 1, 2].map(|i| base[i] + rng.gen_range(-COLOR_JITTER..COLOR_JITTER))
        })
        .collect();
    let hw = size * size;
    Tensor::from_fn(&[3, size, size], |i| {
        let (ch, p) = (i / hw, i % hw);
        let (y, x) = (p / size, p % size);
        let c = labels.data[p] as usize;
        colors[c][ch] + texture(c, y, x)
    })
}

fn gain_field(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let base = rng.gen_range(0.1..0.9);
    let lights: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..=4))
        .map(|_| {
            let cy = rng.gen_range(0.0..size as f64);
            let cx = rng.gen_range(0.0..size as f64);
            let amp = rng.gen_range(0.5..2.4);
            let sigma = rng.gen_range(5.0..14.0);
            (cy, cx, amp, sigma)
        })
        .collect();
    Tensor::from_fn(&[size, size], |p| {
        let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
        let g: f64 = lights
            .iter()
            .map(|&(cy, cx, a, s)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        (base + g).clamp(GAIN_MIN, GAIN_MAX)
    })
}

/// Scene `index` under `seed`. Geometry and day colours depend only on
/// `(seed, index)`; night photometry uses a separate stream.
pub fn synth_scene(seed: u64, index: usize, style: Style, size: usize, classes: usize) -> Result<SynthScene> {
    if size == 0 || !size.is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::Config(format!("scene size {size} must be a positive multiple of {OUTPUT_STRIDE}")));
    }
    if !(2..=PALETTE.len()).contains(&classes) {
        return Err(Error::Config(format!("scenes support 2..={} classes, got {classes}", PALETTE.len())));
    }
    let mut geo = scene_rng(seed, index, 0);
    let (labels, _) = layout(size, classes, &mut geo);
    let day = day_image(&labels, classes, &mut geo);
    match style {
        Style::Day => Ok(SynthScene { image: day, labels, gain: None }),
        Style::Night => {
            let mut photo = scene_rng(seed, index, 1);
            let gain = gain_field(size, &mut photo);
            let noise = Normal::new(0.0, NIGHT_NOISE_SIGMA).unwrap();
            let hw = size * size;
            let mut image = day;
            for (i, v) in image.data_mut().iter_mut().enumerate() {
                let lit = (*v * gain.data()[i % hw]).clamp(0.0, 1.0);
                *v = (lit + noise.sample(&mut photo)).clamp(0.0, 1.0);
            }
            Ok(SynthScene { image, labels, gain: Some(gain) })
        }
    }
}

pub fn synth_dataset(spec: &DataSpec, size: usize, classes: usize) -> Result<Vec<SynthScene>> {
    (spec.start..spec.start + spec.count)
        .map(|i| synth_scene(spec.seed, i, spec.style, size, classes))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_and_night_share_labels() {
        for i in 0..20 {
            let d = synth_scene(3, i, Style::Day, 64, 4).unwrap();
            let n = synth_scene(3, i, Style::Night, 64, 4).unwrap();
            assert_eq!(d.labels, n.labels);
            assert_ne!(d.image, n.image);
        }
    }

    #[test]
    fn day_is_unclipped_and_in_range() {
        for i in 0..50 {
            let s = synth_scene(1, i, Style::Day, 64, 8).unwrap();
            let max = s.image.data().iter().cloned().fold(f64::MIN, f64::max);
            let min = s.image.data().iter().cloned().fold(f64::MAX, f64::min);
            assert!(max < 1.0 && min > 0.0, "scene {i}: {min}..{max}");
            assert!(s.gain.is_none());
        }
    }

    #[test]
    fn night_gain_and_range() {
        for i in 0..20 {
            let s = synth_scene(2, i, Style::Night, 32, 4).unwrap();
            let g = s.gain.unwrap();
            assert!(g.data().iter().all(|&v| (GAIN_MIN..=GAIN_MAX).contains(&v)));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn labels_valid_and_grid_aligned() {
        for i in 0..30 {
            let s = synth_scene(4, i, Style::Day, 64, 4).unwrap();
            assert!(s.labels.data.iter().all(|&c| c < 4));
            for y in 0..64 {
                for x in 0..64 {
                    let cell = s.labels.at(y / 8 * 8, x / 8 * 8);
                    assert_eq!(s.labels.at(y, x), cell);
                }
            }
        }
    }

    #[test]
    fn deterministic_per_index() {
        let spec = DataSpec { style: Style::Night, seed: 9, count: 5, start: 3 };
        let a = synth_dataset(&spec, 32, 4).unwrap();
        let b = synth_dataset(&spec, 32, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], synth_scene(9, 3, Style::Night, 32, 4).unwrap());
        let other = synth_dataset(&DataSpec { seed: 10, ..spec }, 32, 4).unwrap();
        assert_ne!(a[0].labels.data, other[0].labels.data);
    }

    #[test]
    fn data_spec_parsing() {
        let s: DataSpec = "night:7:200".parse().unwrap();
        assert_eq!(s, DataSpec { style: Style::Night, seed: 7, count: 200, start: 0 });
        assert_eq!(s.following(50).to_string(), "night:7:50:200");
        assert_eq!("day:1:2:3".parse::<DataSpec>().unwrap().start, 3);
        for bad in ["night", "dusk:1:2", "day:x:2", "day:1:0", "day:1:2:3:4"] {
            assert!(bad.parse::<DataSpec>().is_err(), "{bad}");
        }
    }
}
