//! Procedural histology-like slides with exact class masks.
//!
//! A slide is white background around a tissue region with wavy borders.
//! The tissue is pink, textured "rest" tissue capped by a curved purple
//! epidermis band; spongiosis blobs sit inside the band and are drawn as a
//! coarse pale/dark speckle whose mean colour is close to the epidermis, so
//! the class is easy to see at full resolution and nearly invisible after
//! heavy downscaling. Two planted disease features separate the classes:
//! MF slides carry dense dark dots in the epidermis, eczema slides have
//! larger spongiosis blobs.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassMask, Disease, Manifest, SlideRecord, EPIDERMIS, NUM_CLASSES, SPONGIOSIS};
use crate::error::{Error, Result};
use crate::raster;

/// Inclusive numeric range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Span<T> {
    pub const fn new(min: T, max: T) -> Self {
        Span { min, max }
    }

    fn is_valid(&self) -> bool {
        self.min <= self.max
    }
}

impl Span<f64> {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }
}

impl Span<usize> {
    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    /// `(height, width)` in pixels.
    pub slide_size: (usize, usize),
    pub n_patients: usize,
    pub slides_per_patient: Span<usize>,
    pub mf_fraction: f64,
    /// Epidermis thickness as a fraction of the slide height.
    pub epidermis_band: Span<f64>,
    pub spongiosis_blob_count: Span<usize>,
    /// Blob radius as a fraction of the slide height.
    pub spongiosis_blob_radius: Span<f64>,
    /// Dark dots per 1000 epidermis pixels on MF slides.
    pub mf_dot_density: f64,
    /// Radius multiplier of spongiosis blobs on eczema slides.
    pub eczema_spongiosis_boost: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            slide_size: (1024, 1024),
            n_patients: 60,
            slides_per_patient: Span::new(1, 4),
            mf_fraction: 60.0 / 164.0,
            epidermis_band: Span::new(0.07, 0.13),
            spongiosis_blob_count: Span::new(2, 5),
            spongiosis_blob_radius: Span::new(0.025, 0.045),
            mf_dot_density: 1.2,
            eczema_spongiosis_boost: 1.6,
        }
    }
}

impl GenConfig {
    /// A handful of patients, one or two slides each.
    pub fn smoke() -> Self {
        GenConfig {
            n_patients: 8,
            slides_per_patient: Span::new(1, 2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.slide_size;
        if h < 256 || w < 256 {
            return Err(Error::config("slide_size", "must be at least 256x256"));
        }
        if self.n_patients == 0 {
            return Err(Error::config("n_patients", "must be positive"));
        }
        if !(self.mf_fraction > 0.0 && self.mf_fraction < 1.0) {
            return Err(Error::config("mf_fraction", "must lie strictly between 0 and 1"));
        }
        if !self.slides_per_patient.is_valid() || self.slides_per_patient.min == 0 {
            return Err(Error::config(
                "slides_per_patient",
                "must be a non-empty range of positive counts",
            ));
        }
        if !self.spongiosis_blob_count.is_valid() {
            return Err(Error::config("spongiosis_blob_count", "min must not exceed max"));
        }
        let b = self.epidermis_band;
        if !b.is_valid() || b.min <= 0.0 {
            return Err(Error::config(
                "epidermis_band",
                "must be a non-empty range of positive fractions",
            ));
        }
        if b.max >= 0.5 {
            return Err(Error::config(
                "epidermis_band",
                "band is thicker than the tissue region of the slide",
            ));
        }
        let r = self.spongiosis_blob_radius;
        if !r.is_valid() || r.min <= 0.0 {
            return Err(Error::config(
                "spongiosis_blob_radius",
                "must be a non-empty range of positive fractions",
            ));
        }
        if !(self.mf_dot_density > 0.0 && self.mf_dot_density.is_finite()) {
            return Err(Error::config("mf_dot_density", "must be positive"));
        }
        if !(self.eczema_spongiosis_boost > 0.0 && self.eczema_spongiosis_boost.is_finite()) {
            return Err(Error::config("eczema_spongiosis_boost", "must be positive"));
        }
        Ok(())
    }

    pub fn mf_patient_count(&self) -> usize {
        ((self.n_patients as f64 * self.mf_fraction).round() as usize).clamp(0, self.n_patients)
    }
}

const WHITE: [u8; 3] = [255, 255, 255];
const DERMIS: [f32; 3] = [232.0, 168.0, 198.0];
const EPIDERMIS_RGB: [f32; 3] = [150.0, 78.0, 158.0];
const SPONGIOSIS_PALE: [f32; 3] = [214.0, 184.0, 226.0];
const SPONGIOSIS_DARK: [f32; 3] = [92.0, 36.0, 104.0];
const DOT: [f32; 3] = [64.0, 22.0, 80.0];
/// Side of the spongiosis speckle cells in pixels.
const SPECKLE: usize = 4;
/// Fraction of the MF dot density present on eczema slides.
const ECZEMA_DOT_SHARE: f64 = 0.15;

/// Sum of a few random low-frequency sinusoids, `amp` is the total amplitude.
struct Wave {
    terms: Vec<(f64, f64, f64)>,
}

impl Wave {
    fn new<R: Rng>(rng: &mut R, amp: f64) -> Self {
        let n = 3;
        let terms = (0..n)
            .map(|i| {
                let freq = rng.gen_range(0.5..1.5) * (i + 1) as f64;
                (amp / n as f64 * rng.gen_range(0.5..1.0), freq, rng.gen_range(0.0..TAU))
            })
            .collect();
        Wave { terms }
    }

    /// `t` in [0, 1].
    fn at(&self, t: f64) -> f64 {
        self.terms.iter().map(|(a, f, p)| a * (TAU * f * t + p).sin()).sum()
    }
}

/// Bilinearly interpolated lattice noise in [-1, 1].
struct ValueNoise {
    cell: usize,
    cols: usize,
    grid: Vec<f32>,
}

impl ValueNoise {
    fn new<R: Rng>(rng: &mut R, w: usize, h: usize, cell: usize) -> Self {
        let cols = w / cell + 2;
        let rows = h / cell + 2;
        ValueNoise {
            cell,
            cols,
            grid: (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let fx = (x % self.cell) as f32 / self.cell as f32;
        let fy = (y % self.cell) as f32 / self.cell as f32;
        let g = |cx: usize, cy: usize| self.grid[cy * self.cols + cx];
        let top = g(gx, gy) * (1.0 - fx) + g(gx + 1, gy) * fx;
        let bot = g(gx, gy + 1) * (1.0 - fx) + g(gx + 1, gy + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn shade(base: [f32; 3], delta: f32) -> Rgb<u8> {
    Rgb(base.map(|c| (c + delta).round().clamp(0.0, 254.0) as u8))
}

/// Renders one slide. Pure function of `(cfg, slide_index, disease)`.
pub fn generate_slide(cfg: &GenConfig, slide_index: usize, disease: Disease) -> (RgbImage, ClassMask) {
    let (h, w) = cfg.slide_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(slide_index as u64 + 1);
    let hf = h as f64;
    let wf = w as f64;

    // tissue outline
    let top_m = rng.gen_range(0.12..0.30);
    let bot_m = rng.gen_range(0.08..0.25);
    let left_m = rng.gen_range(0.03..0.15);
    let right_m = rng.gen_range(0.03..0.15);
    let top_w = Wave::new(&mut rng, 0.05);
    let bot_w = Wave::new(&mut rng, 0.04);
    let left_w = Wave::new(&mut rng, 0.02);
    let right_w = Wave::new(&mut rng, 0.02);
    let top: Vec<f64> = (0..w).map(|x| hf * (top_m + top_w.at(x as f64 / wf))).collect();
    let bottom: Vec<f64> = (0..w).map(|x| hf * (1.0 - bot_m + bot_w.at(x as f64 / wf))).collect();
    let left: Vec<f64> = (0..h).map(|y| wf * (left_m + left_w.at(y as f64 / hf))).collect();
    let right: Vec<f64> = (0..h)
        .map(|y| wf * (1.0 - right_m + right_w.at(y as f64 / hf)))
        .collect();

    // epidermis band hanging from the top border
    let thick = cfg.epidermis_band.sample(&mut rng);
    let thick_w = Wave::new(&mut rng, 0.25);
    let band: Vec<f64> = (0..w).map(|x| hf * thick * (1.0 + thick_w.at(x as f64 / wf))).collect();

    let in_tissue = |x: usize, y: usize| {
        let (xf, yf) = (x as f64, y as f64);
        yf >= top[x] && yf < bottom[x] && xf >= left[y] && xf < right[y]
    };
    let in_band = |x: usize, y: usize| in_tissue(x, y) && (y as f64) < top[x] + band[x];

    // spongiosis blobs, centred inside the band
    let boost = if disease == Disease::Eczema {
        cfg.eczema_spongiosis_boost
    } else {
        1.0
    };
    let n_blobs = cfg.spongiosis_blob_count.sample(&mut rng);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let lo = (wf * 0.18) as usize;
            let hi = (wf * 0.82) as usize;
            let cx = rng.gen_range(lo..hi);
            let cy = top[cx] + band[cx] * rng.gen_range(0.35..0.65);
            let r = hf * cfg.spongiosis_blob_radius.sample(&mut rng) * boost;
            (cx as f64, cy, r * rng.gen_range(1.0..1.8), r)
        })
        .collect();

    let mut mask = ClassMask::filled(w, h, 0);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb(WHITE));
    let texture = ValueNoise::new(&mut rng, w, h, 24);
    let speckle_cols = w / SPECKLE + 1;
    let speckle: Vec<bool> = (0..speckle_cols * (h / SPECKLE + 1))
        .map(|_| rng.gen_bool(0.5))
        .collect();

    for y in 0..h {
        for x in 0..w {
            if !in_tissue(x, y) {
                continue;
            }
            let grain: f32 = rng.gen_range(-10.0..10.0);
            let class = if in_band(x, y) {
                let (xf, yf) = (x as f64, y as f64);
                let spongy = blobs.iter().any(|&(cx, cy, rx, ry)| {
                    let (dx, dy) = ((xf - cx) / rx, (yf - cy) / ry);
                    dx * dx + dy * dy <= 1.0
                });
                if spongy {
                    SPONGIOSIS
                } else {
                    EPIDERMIS
                }
            } else {
                0
            };
            mask.set(x, y, class);
            let px = match class {
                SPONGIOSIS => {
                    let pale = speckle[(y / SPECKLE) * speckle_cols + x / SPECKLE];
                    shade(if pale { SPONGIOSIS_PALE } else { SPONGIOSIS_DARK }, grain)
                }
                EPIDERMIS => shade(EPIDERMIS_RGB, grain + 8.0 * texture.at(x, y)),
                _ => shade(DERMIS, grain + 14.0 * texture.at(x, y)),
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }

    // dark epidermal dots; the mask is unchanged beneath them
    let epi_pixels = mask.as_slice().iter().filter(|&&c| c == EPIDERMIS).count();
    let share = if disease == Disease::Mf { 1.0 } else { ECZEMA_DOT_SHARE };
    let n_dots = (epi_pixels as f64 / 1000.0 * cfg.mf_dot_density * share).round() as usize;
    let dot_r = ((hf / 1024.0) * 2.5).max(1.5);
    let reach = dot_r.ceil() as i64;
    let mut placed = 0;
    let mut tries = 0;
    while placed < n_dots && tries < n_dots * 50 {
        tries += 1;
        let x = rng.gen_range(0..w);
        let y = rng.gen_range(0..h);
        if mask.get(x, y) != EPIDERMIS {
            continue;
        }
        placed += 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if ((dx * dx + dy * dy) as f64) > dot_r * dot_r {
                    continue;
                }
                let (px, py) = (x as i64 + dx, y as i64 + dy);
                if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                    continue;
                }
                let (px, py) = (px as usize, py as usize);
                if mask.get(px, py) == EPIDERMIS {
                    img.put_pixel(px as u32, py as u32, shade(DOT, 0.0));
                }
            }
        }
    }
    (img, mask)
}

/// Fraction of pixels per class id, for every id below [`NUM_CLASSES`].
pub fn class_proportions(mask: &ClassMask) -> BTreeMap<u8, f64> {
    let hist = mask.histogram(NUM_CLASSES.max(mask.as_slice().iter().copied().max().unwrap_or(0) as usize + 1));
    let total = mask.as_slice().len().max(1) as f64;
    hist.iter()
        .enumerate()
        .map(|(c, &n)| (c as u8, n as f64 / total))
        .collect()
}

/// Patient ids with their disease and slide count, in generation order.
fn plan_patients(cfg: &GenConfig) -> Vec<(String, Disease, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut diseases: Vec<Disease> = (0..cfg.n_patients)
        .map(|i| {
            if i < cfg.mf_patient_count() {
                Disease::Mf
            } else {
                Disease::Eczema
            }
        })
        .collect();
    diseases.shuffle(&mut rng);
    diseases
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("p{i:03}"), d, cfg.slides_per_patient.sample(&mut rng)))
        .collect()
}

/// Writes `slides/*.png`, `masks/*.png` and `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    for sub in ["slides", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut jobs = Vec::new();
    for (patient, disease, n) in plan_patients(cfg) {
        for _ in 0..n {
            let idx = jobs.len();
            jobs.push((idx, format!("s{idx:04}"), patient.clone(), disease));
        }
    }
    let (h, w) = cfg.slide_size;
    let records = jobs
        .par_iter()
        .map(|(idx, slide_id, patient, disease)| {
            let (img, mask) = generate_slide(cfg, *idx, *disease);
            let image_rel = PathBuf::from("slides").join(format!("{slide_id}.png"));
            let mask_rel = PathBuf::from("masks").join(format!("{slide_id}.png"));
            raster::write_rgb(&out_dir.join(&image_rel), &img)?;
            raster::write_mask(&out_dir.join(&mask_rel), &mask)?;
            Ok(SlideRecord {
                slide_id: slide_id.clone(),
                patient_id: patient.clone(),
                disease: *disease,
                image_path: image_rel,
                mask_path: Some(mask_rel),
                width: w,
                height: h,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(cfg.seed, records, out_dir)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
