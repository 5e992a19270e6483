//! Synthetic segmentation task: filled ellipses (one per foreground class)
//! on a textured background, plus rings of matching intensity that are not
//! part of the mask.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::imageio::{save_gray_png, save_mask_png};
use super::manifest::{DatasetManifest, ManifestEntry, MANIFEST_FILE};
use super::transform::split_assignment;
use crate::error::{CtsError, Result};
use crate::metrics::LabelMap;
use crate::tensor::RngState;

pub const MIN_SIZE: usize = 16;
const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    /// Centre in pixel units; pixel `(r, c)` is sampled at `(c + 0.5, r + 0.5)`.
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub class: u8,
}

impl Ellipse {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dx = col as f64 + 0.5 - self.cx;
        let dy = row as f64 + 0.5 - self.cy;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ring {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub thickness: f64,
    pub intensity: f64,
}

impl Ring {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let d = (col as f64 + 0.5 - self.cx).hypot(row as f64 + 0.5 - self.cy);
        d <= self.radius && d >= self.radius - self.thickness
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthGeometry {
    pub ellipses: Vec<Ellipse>,
    pub rings: Vec<Ring>,
}

impl SynthGeometry {
    /// Label map implied by the ellipses alone.
    pub fn rasterize(&self, size: usize) -> LabelMap {
        let mut labels = vec![0u8; size * size];
        for e in &self.ellipses {
            for r in 0..size {
                for c in 0..size {
                    if e.contains(r, c) {
                        labels[r * size + c] = e.class;
                    }
                }
            }
        }
        LabelMap { width: size, height: size, labels }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    /// 8-bit grayscale pixels, row-major.
    pub pixels: Vec<u8>,
    pub mask: LabelMap,
    pub geometry: SynthGeometry,
}

/// Mean intensity of foreground class `k` (1-based).
pub fn class_intensity(k: u8, classes: usize) -> f64 {
    if classes <= 2 {
        0.75
    } else {
        0.55 + 0.35 * (k as f64 - 1.0) / (classes as f64 - 2.0)
    }
}

fn check_args(size: usize, classes: usize) -> Result<()> {
    if size < MIN_SIZE {
        return Err(CtsError::config(format!("synthetic image size must be at least {}, got {}", MIN_SIZE, size)));
    }
    if !(2..=8).contains(&classes) {
        return Err(CtsError::config(format!("synthetic class count must be in 2..=8, got {}", classes)));
    }
    Ok(())
}

/// Random non-overlapping ellipses and rings; `None` when greedy placement
/// runs out of room.
fn layout(rng: &mut RngState, s: f64, f: f64, classes: usize) -> Option<(Vec<Ellipse>, Vec<Ring>)> {
    let gap = s / 32.0;
    // Bounding discs (cx, cy, radius) of everything placed so far.
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut place = |rng: &mut RngState, radius: f64| {
        let (lo, hi) = (radius + 0.5, s - radius - 0.5);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (cx, cy) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            if placed.iter().all(|&(x, y, r)| (cx - x).hypot(cy - y) >= r + radius + gap) {
                placed.push((cx, cy, radius));
                return Some((cx, cy));
            }
        }
        None
    };
    let mut ellipses = Vec::with_capacity(classes - 1);
    for k in 1..classes as u8 {
        let a = rng.random_range(0.10 * f * s..0.20 * f * s);
        let b = rng.random_range(0.10 * f * s..0.20 * f * s);
        let theta = rng.random_range(0.0..PI);
        let (cx, cy) = place(rng, a.max(b))?;
        ellipses.push(Ellipse { cx, cy, a, b, theta, class: k });
    }
    let n_rings = rng.random_range(1..=2);
    let mut rings = Vec::with_capacity(n_rings);
    for _ in 0..n_rings {
        let radius = rng.random_range(0.10 * f * s..0.18 * f * s);
        let thickness = (s / 32.0).max(1.5);
        let k = rng.random_range(1..classes as u8);
        let (cx, cy) = place(rng, radius)?;
        rings.push(Ring { cx, cy, radius, thickness, intensity: class_intensity(k, classes) });
    }
    Some((ellipses, rings))
}

/// Generates sample `index` of the dataset determined by `seed`.
pub fn synth_sample(index: usize, size: usize, classes: usize, seed: u64) -> Result<SynthSample> {
    check_args(size, classes)?;
    let mut rng = RngState::new(seed).derive(index as u64);
    let s = size as f64;
    // Up to classes + 1 objects; shrink so they always fit.
    let f = (3.0 / (classes as f64 + 1.0)).sqrt().min(1.0);
    let (ellipses, rings) = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| layout(&mut rng, s, f, classes))
        .ok_or_else(|| CtsError::config(format!("cannot fit {} classes into a {}x{} synthetic image", classes, size, size)))?;

    let (fx, fy, phase) = (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0), rng.random_range(0.0..2.0 * PI));
    let noise = Normal::new(0.0, 0.06).expect("valid deviation");
    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 / s, r as f64 / s);
            let mut v = 0.3 + 0.08 * (2.0 * PI * (fx * x + fy * y) + phase).sin();
            if let Some(ring) = rings.iter().find(|g| g.contains(r, c)) {
                v = ring.intensity;
            }
            if let Some(e) = ellipses.iter().find(|e| e.contains(r, c)) {
                v = class_intensity(e.class, classes);
            }
            v += noise.sample(&mut rng);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let geometry = SynthGeometry { ellipses, rings };
    let mask = geometry.rasterize(size);
    Ok(SynthSample { id: format!("synth_{:04}", index), pixels, mask, geometry })
}

/// Writes `count` samples under `out/images` and `out/masks` plus a split
/// manifest at `out/manifest.txt`.
pub fn synth_generate(count: usize, size: usize, classes: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    check_args(size, classes)?;
    let splits = split_assignment(count, seed)?;
    for dir in ["images", "masks"] {
        let p = out.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| CtsError::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(count);
    for (i, &split) in splits.iter().enumerate() {
        let sample = synth_sample(i, size, classes, seed)?;
        let image = Path::new("images").join(format!("{}.png", sample.id));
        let mask = Path::new("masks").join(format!("{}.png", sample.id));
        let values: Vec<f32> = sample.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        save_gray_png(&out.join(&image), size, size, &values)?;
        save_mask_png(&out.join(&mask), &sample.mask)?;
        entries.push(ManifestEntry { split, image, mask });
    }
    let manifest = DatasetManifest { root: out.to_path_buf(), classes, channels: 1, entries };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
