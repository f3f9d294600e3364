//! Seeded desk-scale benchmark: small glyph images standing in for a
//! multi-class photo dataset with one "vehicle" class of interest.
//!
//! * `vehicle`: a two-tier body with dark wheels on a two-tone background.
//! * `tower`, `ring`: auxiliary glyph families on the same backgrounds.
//! * `scene`: the backgrounds alone.
//! * a fraction of the non-vehicle training images carry weather noise, so
//!   weather by itself does not identify a class.
//! * adverse domain: vehicles under fog, speckle and streak noise.
//! * negatives: the same weather noise over empty backgrounds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::seed;
use crate::tensor::Tensor;

pub const POSITIVE_CLASS: &str = "vehicle";
pub const CLASSES: [&str; 4] = ["vehicle", "tower", "ring", "scene"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Glyph {
    Vehicle,
    Tower,
    Ring,
    Scene,
}

impl Glyph {
    pub fn for_class(name: &str) -> Option<Glyph> {
        match name {
            "vehicle" => Some(Glyph::Vehicle),
            "tower" => Some(Glyph::Tower),
            "ring" => Some(Glyph::Ring),
            "scene" => Some(Glyph::Scene),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub size: usize,
    pub train_per_class: usize,
    pub pool_size: usize,
    pub test_per_set: usize,
    /// Share of non-vehicle training images with weather noise.
    pub weather_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 2024,
            size: 16,
            train_per_class: 500,
            pool_size: 100,
            test_per_set: 100,
            weather_fraction: 0.15,
        }
    }
}

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn background(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let top: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.8));
        let bottom: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.6));
        let horizon = rng.gen_range(size as f32 * 0.4..size as f32 * 0.7);
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            let t = ((y as f32 - horizon) / 2.0).tanh() * 0.5 + 0.5;
            for _ in 0..size {
                px.push(std::array::from_fn(|c| {
                    let v = top[c] * (1.0 - t) + bottom[c] * t;
                    (v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0)
                }));
            }
        }
        Canvas { size, px }
    }

    fn fill(&mut self, x0: usize, y0: usize, w: usize, h: usize, color: [f32; 3]) {
        for y in y0..(y0 + h).min(self.size) {
            for x in x0..(x0 + w).min(self.size) {
                self.px[y * self.size + x] = color;
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let n = self.size * self.size;
        Tensor::from_fn(&[3, self.size, self.size], |i| self.px[i % n][i / n])
    }
}

fn glyph_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // One dominant channel keeps glyphs saturated against muted backgrounds.
    let hot = rng.gen_range(0..3);
    std::array::from_fn(|c| {
        if c == hot {
            rng.gen_range(0.75..1.0)
        } else {
            rng.gen_range(0.0..0.35)
        }
    })
}

fn draw_vehicle(cv: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = cv.size;
    let body_w = rng.gen_range(s * 7 / 16..=s * 11 / 16);
    let body_h = rng.gen_range((s * 3 / 16).max(2)..=(s / 4).max(3));
    let x0 = rng.gen_range(1..=s - body_w - 1);
    let y0 = rng.gen_range(s * 5 / 16..=s - body_h - 3);
    let color = glyph_color(rng);
    cv.fill(x0, y0, body_w, body_h, color);
    let cab_w = rng.gen_range(body_w * 2 / 5..=body_w * 3 / 5);
    let cab_x = x0 + rng.gen_range(1..=body_w - cab_w - 1);
    let cab_h = (s / 8).max(2);
    cv.fill(cab_x, y0 - cab_h, cab_w, cab_h, color);
    let wheel = [rng.gen_range(0.0..0.12); 3];
    let wh = (s / 8).max(2);
    cv.fill(x0 + 1, y0 + body_h, wh, wh, wheel);
    cv.fill(x0 + body_w - 1 - wh, y0 + body_h, wh, wh, wheel);
}

fn draw_tower(cv: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = cv.size;
    let w = rng.gen_range((s / 8).max(2)..=(s * 3 / 16).max(3));
    let h = rng.gen_range(s / 2..=s * 3 / 4);
    let x0 = rng.gen_range(2..=s - w - 2);
    let y0 = rng.gen_range(1..=s - h - 1);
    let color = glyph_color(rng);
    cv.fill(x0, y0, w, h, color);
    let cap_w = w + 2;
    cv.fill(x0.saturating_sub(1), y0, cap_w, (s / 8).max(2), color);
}

fn draw_ring(cv: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = cv.size;
    let side = rng.gen_range(s * 6 / 16..=s * 9 / 16);
    let t = rng.gen_range(1..=(s / 8).max(1));
    let x0 = rng.gen_range(1..=s - side - 1);
    let y0 = rng.gen_range(1..=s - side - 1);
    let color = glyph_color(rng);
    cv.fill(x0, y0, side, t, color);
    cv.fill(x0, y0 + side - t, side, t, color);
    cv.fill(x0, y0, t, side, color);
    cv.fill(x0 + side - t, y0, t, side, color);
}

/// One clean glyph image.
pub fn render_glyph(glyph: Glyph, size: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let mut cv = Canvas::background(size, &mut rng);
    match glyph {
        Glyph::Vehicle => draw_vehicle(&mut cv, &mut rng),
        Glyph::Tower => draw_tower(&mut cv, &mut rng),
        Glyph::Ring => draw_ring(&mut cv, &mut rng),
        Glyph::Scene => {}
    }
    let img = cv.into_tensor();
    if rng.gen_bool(0.5) {
        imageio::traditional_augment(&img, imageio::AugmentOp::FlipH)
    } else {
        img
    }
}

/// Fog blend toward white, snow speckle and short diagonal streaks.
pub fn weather(image: &Tensor, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let (c, h, w) = image.dims3().expect("weather expects [C,H,W]");
    let mut out = image.clone();
    let d = out.data_mut();
    let fog = rng.gen_range(0.15..0.35);
    let haze = rng.gen_range(0.85..0.95);
    d.iter_mut().for_each(|v| *v = *v * (1.0 - fog) + haze * fog);
    let mut flake = |y: usize, x: usize, rng: &mut ChaCha8Rng| {
        let v = rng.gen_range(0.85..1.0);
        for ch in 0..c {
            d[(ch * h + y) * w + x] = v;
        }
    };
    let density = rng.gen_range(0.08..0.2);
    for y in 0..h {
        for x in 0..w {
            if rng.gen_bool(density) {
                flake(y, x, &mut rng);
            }
        }
    }
    for _ in 0..rng.gen_range(1..=3) {
        let len = rng.gen_range(h / 4..=h / 2);
        let (mut y, mut x) = (rng.gen_range(0..h), rng.gen_range(0..w));
        for _ in 0..len {
            flake(y, x, &mut rng);
            y = (y + 1) % h;
            x = (x + 1) % w;
        }
    }
    out
}

/// Stream identifiers keep every image family on its own seed sequence.
#[derive(Clone, Copy)]
enum Stream {
    Train(usize),
    Pool,
    AdverseTest,
    Negatives,
    Reference,
}

fn stream_seed(master: u64, stream: Stream, i: usize) -> u64 {
    let s = match stream {
        Stream::Train(class) => 10 + class as u64,
        Stream::Pool => 1,
        Stream::AdverseTest => 2,
        Stream::Negatives => 3,
        Stream::Reference => 4,
    };
    seed::derive_seed(seed::derive_seed(master, s), i as u64)
}

pub fn train_image(cfg: &BenchmarkConfig, class: usize, i: usize) -> Tensor {
    let glyph = Glyph::for_class(CLASSES[class]).expect("known class");
    let s = stream_seed(cfg.seed, Stream::Train(class), i);
    let clean = render_glyph(glyph, cfg.size, s);
    let weathered = glyph != Glyph::Vehicle && seed::counter_uniform(s, 0) < cfg.weather_fraction as f32;
    if weathered {
        weather(&clean, seed::derive_seed(s, 1))
    } else {
        clean
    }
}

pub fn adverse_vehicle(cfg: &BenchmarkConfig, pool: bool, i: usize) -> Tensor {
    let stream = if pool { Stream::Pool } else { Stream::AdverseTest };
    let s = stream_seed(cfg.seed, stream, i);
    weather(&render_glyph(Glyph::Vehicle, cfg.size, s), seed::derive_seed(s, 1))
}

pub fn negative(cfg: &BenchmarkConfig, i: usize) -> Tensor {
    let s = stream_seed(cfg.seed, Stream::Negatives, i);
    negative_from_seed(cfg.size, s)
}

fn negative_from_seed(size: usize, s: u64) -> Tensor {
    let mut rng = seed::rng(s);
    let bg = Canvas::background(size, &mut rng).into_tensor();
    weather(&bg, seed::derive_seed(s, 1))
}

/// Winter scene used as the style reference.
pub fn reference(cfg: &BenchmarkConfig) -> Tensor {
    negative_from_seed(cfg.size, stream_seed(cfg.seed, Stream::Reference, 0))
}

/// Where [`write_benchmark`] put everything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkLayout {
    pub train: PathBuf,
    pub adverse_pool: PathBuf,
    pub adverse_test: PathBuf,
    pub negatives_test: PathBuf,
    pub reference: PathBuf,
}

impl BenchmarkLayout {
    pub fn under(root: &Path) -> Self {
        BenchmarkLayout {
            train: root.join("train"),
            adverse_pool: root.join("adverse_pool"),
            adverse_test: root.join("test").join("adverse"),
            negatives_test: root.join("test").join("negatives"),
            reference: root.join("reference.png"),
        }
    }
}

fn write_set(dir: &Path, n: usize, make: impl Fn(usize) -> Tensor) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..n {
        imageio::save_image(&make(i), dir.join(format!("{i:04}.png")))?;
    }
    Ok(())
}

/// Writes the benchmark as PNG folders under `root`:
///
/// ```text
/// train/<class>/NNNN.png
/// adverse_pool/NNNN.png
/// test/adverse/vehicle/NNNN.png
/// test/negatives/landscape/NNNN.png
/// reference.png
/// ```
pub fn write_benchmark(root: &Path, cfg: &BenchmarkConfig) -> Result<BenchmarkLayout> {
    if cfg.size < 8 {
        return Err(Error::InvalidConfig("benchmark images must be at least 8x8".into()));
    }
    let layout = BenchmarkLayout::under(root);
    for (c, name) in CLASSES.iter().enumerate() {
        write_set(&layout.train.join(name), cfg.train_per_class, |i| train_image(cfg, c, i))?;
    }
    write_set(&layout.adverse_pool, cfg.pool_size, |i| adverse_vehicle(cfg, true, i))?;
    write_set(&layout.adverse_test.join(POSITIVE_CLASS), cfg.test_per_set, |i| {
        adverse_vehicle(cfg, false, i)
    })?;
    write_set(&layout.negatives_test.join("landscape"), cfg.test_per_set, |i| negative(cfg, i))?;
    imageio::save_image(&reference(cfg), &layout.reference)?;
    Ok(layout)
}
