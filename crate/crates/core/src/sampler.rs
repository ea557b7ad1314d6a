//! Class-balanced patch extraction.
//!
//! Top-left corners are drawn uniformly over the slide; a candidate closer
//! than `min_corner_distance` to any corner already taken from the same slide
//! is rejected, otherwise the window is typed and kept if its type still has
//! quota. Window types come from summed-area tables, so each candidate costs
//! O(1) regardless of patch size.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassMask, Manifest, SlideRecord, EPIDERMIS, SPONGIOSIS};
use crate::error::{Error, Result};
use crate::raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchType {
    Background,
    Spongiosis,
    Epidermis,
    OtherTissue,
}

impl PatchType {
    pub const ALL: [PatchType; 4] = [
        PatchType::Background,
        PatchType::Spongiosis,
        PatchType::Epidermis,
        PatchType::OtherTissue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatchType::Background => "background",
            PatchType::Spongiosis => "spongiosis",
            PatchType::Epidermis => "epidermis",
            PatchType::OtherTissue => "other_tissue",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PatchType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatchType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatchType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Runtime(format!("unknown patch type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub min_corner_distance: f64,
    pub spongiosis_threshold: f64,
    pub epidermis_threshold: f64,
    pub quota_per_type: usize,
    /// Per-type budget is `max_attempts_per_patch * quota_per_type` candidates.
    pub max_attempts_per_patch: usize,
    /// A pixel counts as white when every channel is `>= 255 - white_tolerance`.
    pub white_tolerance: u8,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: 512,
            min_corner_distance: 100.0,
            spongiosis_threshold: 0.20,
            epidermis_threshold: 0.40,
            quota_per_type: 50,
            max_attempts_per_patch: 1000,
            white_tolerance: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size", "must be positive"));
        }
        if !(self.min_corner_distance >= 0.0 && self.min_corner_distance.is_finite()) {
            return Err(Error::config("min_corner_distance", "must be a finite value >= 0"));
        }
        for (name, t) in [
            ("spongiosis_threshold", self.spongiosis_threshold),
            ("epidermis_threshold", self.epidermis_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config(name, "must lie strictly between 0 and 1"));
            }
        }
        if self.max_attempts_per_patch == 0 {
            return Err(Error::config("max_attempts_per_patch", "must be positive"));
        }
        Ok(())
    }

    fn is_white(&self, p: &Rgb<u8>) -> bool {
        p.0.iter().all(|&c| c >= 255 - self.white_tolerance)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub patch_type: PatchType,
}

/// Typing rules in order, first match wins: all white, then spongiosis share,
/// then combined epidermis + spongiosis share, else other tissue.
fn type_from_counts(total: u64, non_white: u64, spongiosis: u64, epi_or_spong: u64, cfg: &SamplerConfig) -> PatchType {
    let t = total as f64;
    if non_white == 0 {
        PatchType::Background
    } else if spongiosis as f64 > cfg.spongiosis_threshold * t {
        PatchType::Spongiosis
    } else if epi_or_spong as f64 > cfg.epidermis_threshold * t {
        PatchType::Epidermis
    } else {
        PatchType::OtherTissue
    }
}

/// Types one window by direct pixel inspection.
pub fn classify_patch(image: &RgbImage, mask: &ClassMask, cfg: &SamplerConfig) -> Result<PatchType> {
    let dims = (image.width() as usize, image.height() as usize);
    if dims != mask.dims() {
        return Err(Error::DimensionMismatch {
            what: "patch image vs mask".into(),
            expected: dims,
            found: mask.dims(),
        });
    }
    let non_white = image.pixels().filter(|p| !cfg.is_white(p)).count() as u64;
    let spong = mask.as_slice().iter().filter(|&&c| c == SPONGIOSIS).count() as u64;
    let epi = mask.as_slice().iter().filter(|&&c| c == EPIDERMIS).count() as u64;
    let total = (dims.0 * dims.1) as u64;
    Ok(type_from_counts(total, non_white, spong, epi + spong, cfg))
}

/// Summed-area table with a zero top row and left column.
struct Sat {
    w: usize,
    data: Vec<u32>,
}

impl Sat {
    fn build(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let w = width + 1;
        let mut data = vec![0u32; w * (height + 1)];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += f(x, y) as u32;
                data[(y + 1) * w + x + 1] = data[y * w + x + 1] + row;
            }
        }
        Sat { w, data }
    }

    fn sum(&self, x: usize, y: usize, s: usize) -> u64 {
        let at = |xx: usize, yy: usize| self.data[yy * self.w + xx] as u64;
        at(x + s, y + s) + at(x, y) - at(x + s, y) - at(x, y + s)
    }
}

/// A slide held in memory.
pub struct SlideData {
    pub slide_id: String,
    pub image: RgbImage,
    pub mask: ClassMask,
}

impl SlideData {
    pub fn new(slide_id: impl Into<String>, image: RgbImage, mask: ClassMask) -> Result<Self> {
        let dims = (image.width() as usize, image.height() as usize);
        if dims != mask.dims() {
            return Err(Error::DimensionMismatch {
                what: "slide image vs mask".into(),
                expected: dims,
                found: mask.dims(),
            });
        }
        Ok(SlideData {
            slide_id: slide_id.into(),
            image,
            mask,
        })
    }

    pub fn load(manifest: &Manifest, rec: &SlideRecord) -> Result<Self> {
        let mask_path = manifest
            .mask_path(rec)
            .ok_or_else(|| Error::Runtime(format!("slide {} has no mask; patches need ground truth", rec.slide_id)))?;
        let image = raster::read_rgb(&manifest.image_path(rec))?;
        let mask = raster::read_mask(&mask_path)?;
        SlideData::new(rec.slide_id.clone(), image, mask)
    }
}

/// Precomputed window statistics for O(1) typing.
pub struct WindowTyper<'a> {
    cfg: &'a SamplerConfig,
    non_white: Sat,
    spong: Sat,
    epi_or_spong: Sat,
}

impl<'a> WindowTyper<'a> {
    pub fn new(slide: &SlideData, cfg: &'a SamplerConfig) -> Self {
        let (w, h) = slide.mask.dims();
        let m = &slide.mask;
        WindowTyper {
            cfg,
            non_white: Sat::build(w, h, |x, y| !cfg.is_white(slide.image.get_pixel(x as u32, y as u32))),
            spong: Sat::build(w, h, |x, y| m.get(x, y) == SPONGIOSIS),
            epi_or_spong: Sat::build(w, h, |x, y| matches!(m.get(x, y), EPIDERMIS | SPONGIOSIS)),
        }
    }

    pub fn classify(&self, x: usize, y: usize, size: usize) -> PatchType {
        type_from_counts(
            (size * size) as u64,
            self.non_white.sum(x, y, size),
            self.spong.sum(x, y, size),
            self.epi_or_spong.sum(x, y, size),
            self.cfg,
        )
    }
}

/// Draws up to `quota_per_type` patches of each type from one slide.
///
/// Candidates violating the corner distance are redrawn without charging any
/// type. Every other candidate counts as one attempt for each type it did not
/// fill; a type stops once its budget is spent. A global cap of
/// `4 * budget` rejected-for-distance draws prevents livelock on crowded
/// slides.
pub fn extract_patches(slide: &SlideData, cfg: &SamplerConfig, seed: u64) -> Result<Vec<PatchRef>> {
    cfg.validate()?;
    let (w, h) = slide.mask.dims();
    let s = cfg.patch_size;
    if w < s || h < s {
        return Err(Error::config(
            "patch_size",
            format!("slide {} is {w}x{h}, smaller than the {s} px patch", slide.slide_id),
        ));
    }
    let typer = WindowTyper::new(slide, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = cfg.max_attempts_per_patch.saturating_mul(cfg.quota_per_type);
    let mut counts = [0usize; 4];
    let mut attempts = [0usize; 4];
    let mut too_close = 0usize;
    let mut out: Vec<PatchRef> = Vec::new();
    let d2 = cfg.min_corner_distance * cfg.min_corner_distance;

    let open =
        |counts: &[usize; 4], attempts: &[usize; 4], i: usize| counts[i] < cfg.quota_per_type && attempts[i] < budget;
    while (0..4).any(|i| open(&counts, &attempts, i)) {
        let x = rng.gen_range(0..=w - s);
        let y = rng.gen_range(0..=h - s);
        let clash = out.iter().any(|p| {
            let (dx, dy) = (p.x as f64 - x as f64, p.y as f64 - y as f64);
            dx * dx + dy * dy < d2
        });
        if clash {
            too_close += 1;
            if too_close >= budget.saturating_mul(4) {
                log::debug!("{}: corner-distance cap reached", slide.slide_id);
                break;
            }
            continue;
        }
        let t = typer.classify(x, y, s).index();
        if counts[t] < cfg.quota_per_type {
            counts[t] += 1;
            out.push(PatchRef {
                slide_id: slide.slide_id.clone(),
                x,
                y,
                size: s,
                patch_type: PatchType::ALL[t],
            });
        }
        for i in 0..4 {
            if i != t && open(&counts, &attempts, i) {
                attempts[i] += 1;
            }
        }
    }
    Ok(out)
}

/// One row of the patch index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRow {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub patch_type: PatchType,
    pub image_file: PathBuf,
    pub mask_file: PathBuf,
}

pub const INDEX_FILE: &str = "index.csv";

/// Writes `images/`, `masks/` and `index.csv` under `out_dir`. Slides are
/// loaded once each, in order of first appearance.
pub fn materialize_patches(refs: &[PatchRef], manifest: &Manifest, out_dir: &Path) -> Result<Vec<PatchRow>> {
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rows = Vec::with_capacity(refs.len());
    let mut loaded: Option<SlideData> = None;
    for r in refs {
        if loaded.as_ref().is_none_or(|s| s.slide_id != r.slide_id) {
            let rec = manifest
                .get(&r.slide_id)
                .ok_or_else(|| Error::Runtime(format!("patch refers to unknown slide {}", r.slide_id)))?;
            loaded = Some(SlideData::load(manifest, rec)?);
        }
        let slide = loaded.as_ref().expect("loaded above");
        let (w, h) = slide.mask.dims();
        if r.size == 0 || r.x + r.size > w || r.y + r.size > h {
            return Err(Error::Runtime(format!(
                "patch {}@({}, {}) size {} lies outside the {w}x{h} slide",
                r.slide_id, r.x, r.y, r.size
            )));
        }
        let stem = format!("{}_{}_{}", r.slide_id, r.x, r.y);
        let image_file = PathBuf::from("images").join(format!("{stem}.png"));
        let mask_file = PathBuf::from("masks").join(format!("{stem}.png"));
        let img =
            image::imageops::crop_imm(&slide.image, r.x as u32, r.y as u32, r.size as u32, r.size as u32).to_image();
        raster::write_rgb(&out_dir.join(&image_file), &img)?;
        raster::write_mask(&out_dir.join(&mask_file), &slide.mask.window(r.x, r.y, r.size, r.size))?;
        rows.push(PatchRow {
            slide_id: r.slide_id.clone(),
            x: r.x,
            y: r.y,
            size: r.size,
            patch_type: r.patch_type,
            image_file,
            mask_file,
        });
    }
    write_index(&out_dir.join(INDEX_FILE), &rows)?;
    Ok(rows)
}

pub fn write_index(path: &Path, rows: &[PatchRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        wtr.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<Vec<PatchRow>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            artifact: path.to_path_buf(),
            command: "extract".into(),
        });
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Runtime(format!("{}: {e}", path.display()))
}

/// A grid window with its top-left corner in the source raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T> {
    pub x: usize,
    pub y: usize,
    pub data: T,
}

fn grid_corners(w: usize, h: usize, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let (nx, ny) = (w.div_ceil(tile), h.div_ceil(tile));
    (0..ny).flat_map(move |j| (0..nx).map(move |i| (i * tile, j * tile)))
}

/// Non-overlapping row-major `tile`×`tile` windows; edge windows are padded
/// with white.
pub fn grid_cut_rgb(img: &RgbImage, tile: usize) -> Vec<Window<RgbImage>> {
    assert!(tile > 0, "tile must be positive");
    grid_corners(img.width() as usize, img.height() as usize, tile)
        .map(|(x, y)| Window {
            x,
            y,
            data: raster::crop_rgb_padded(img, x, y, tile, [255, 255, 255]),
        })
        .collect()
}

/// Mask counterpart of [`grid_cut_rgb`]; padding is class 0.
pub fn grid_cut_mask(mask: &ClassMask, tile: usize) -> Vec<Window<ClassMask>> {
    assert!(tile > 0, "tile must be positive");
    let (w, h) = mask.dims();
    grid_corners(w, h, tile)
        .map(|(x, y)| {
            let mut out = ClassMask::filled(tile, tile, 0);
            for yy in 0..tile.min(h - y) {
                for xx in 0..tile.min(w - x) {
                    out.set(xx, yy, mask.get(x + xx, y + yy));
                }
            }
            Window { x, y, data: out }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::REST;

    fn cfg() -> SamplerConfig {
        SamplerConfig {
            patch_size: 10,
            min_corner_distance: 3.0,
            quota_per_type: 5,
            max_attempts_per_patch: 50,
            ..SamplerConfig::default()
        }
    }

    fn tissue(n: usize) -> RgbImage {
        RgbImage::from_pixel(n as u32, n as u32, Rgb([200, 150, 180]))
    }

    /// 10x10 window with the given numbers of spongiosis and epidermis pixels.
    fn window(spong: usize, epi: usize) -> ClassMask {
        let mut data = vec![REST; 100];
        data[..spong].fill(SPONGIOSIS);
        data[spong..spong + epi].fill(EPIDERMIS);
        ClassMask::new(10, 10, data).unwrap()
    }

    #[test]
    fn typing_rules_in_order() {
        let c = cfg();
        let white = RgbImage::from_pixel(10, 10, Rgb([255, 255, 255]));
        assert_eq!(
            classify_patch(&white, &window(0, 0), &c).unwrap(),
            PatchType::Background
        );
        // the mask is irrelevant for an all-white window
        assert_eq!(
            classify_patch(&white, &window(50, 0), &c).unwrap(),
            PatchType::Background
        );
        let img = tissue(10);
        assert_eq!(classify_patch(&img, &window(21, 0), &c).unwrap(), PatchType::Spongiosis);
        assert_eq!(
            classify_patch(&img, &window(20, 0), &c).unwrap(),
            PatchType::OtherTissue
        );
        assert_eq!(classify_patch(&img, &window(15, 30), &c).unwrap(), PatchType::Epidermis);
        assert_eq!(
            classify_patch(&img, &window(20, 20), &c).unwrap(),
            PatchType::OtherTissue
        );
        assert_eq!(classify_patch(&img, &window(0, 5), &c).unwrap(), PatchType::OtherTissue);
        // one off-white pixel is enough to leave the background type
        let mut almost = white.clone();
        almost.put_pixel(3, 3, Rgb([255, 254, 255]));
        assert_eq!(
            classify_patch(&almost, &window(0, 0), &c).unwrap(),
            PatchType::OtherTissue
        );
        let lax = SamplerConfig {
            white_tolerance: 1,
            ..c.clone()
        };
        assert_eq!(
            classify_patch(&almost, &window(0, 0), &lax).unwrap(),
            PatchType::Background
        );
        assert!(classify_patch(&tissue(9), &window(0, 0), &c).is_err());
    }

    #[test]
    fn all_white_slide_yields_only_background() {
        let img = RgbImage::from_pixel(60, 60, Rgb([255, 255, 255]));
        let slide = SlideData::new("w", img, ClassMask::filled(60, 60, 0)).unwrap();
        let refs = extract_patches(&slide, &cfg(), 1).unwrap();
        assert_eq!(refs.len(), 5);
        assert!(refs.iter().all(|r| r.patch_type == PatchType::Background));
    }

    #[test]
    fn slide_smaller_than_patch_is_an_error() {
        let slide = SlideData::new("s", tissue(8), ClassMask::filled(8, 8, 0)).unwrap();
        assert!(extract_patches(&slide, &cfg(), 0).is_err());
    }

    #[test]
    fn crowded_slide_terminates() {
        // only one valid corner position exists
        let slide = SlideData::new("s", tissue(10), ClassMask::filled(10, 10, 0)).unwrap();
        let refs = extract_patches(&slide, &cfg(), 0).unwrap();
        assert_eq!(refs.len(), 1);
    }

    #[test]
    fn grid_cut_pads_edges() {
        let img = tissue(1000);
        let windows = grid_cut_rgb(&img, 512);
        assert_eq!(windows.len(), 4);
        let last = &windows[3];
        assert_eq!((last.x, last.y), (512, 512));
        assert_eq!(last.data.get_pixel(487, 487).0, [200, 150, 180]);
        assert_eq!(last.data.get_pixel(488, 488).0, [255, 255, 255]);
        assert_eq!(grid_cut_rgb(&tissue(1024), 512).len(), 4);
        let mask = ClassMask::filled(1000, 1000, 1);
        let mw = grid_cut_mask(&mask, 512);
        assert_eq!(mw[1].data.get(487, 0), 1);
        assert_eq!(mw[1].data.get(488, 0), 0);
    }
}
