//! Whole-slide inference by non-overlapping tiles.
//!
//! A slide is resized to tile-aligned dimensions, cut row-major into tiles,
//! each tile is predicted, and the class probabilities are stitched back
//! before the argmax. Evaluation then brings the prediction back to the slide
//! size and halves both it and the ground truth.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::ClassMask;
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts};
use crate::nn::Tensor;
use crate::raster;
use crate::seg::{normalize_rgb, SegModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Round each side to the nearest multiple of the tile (ties up), at
    /// least one tile.
    NearestMultiple,
    CeilMultiple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileConfig {
    pub tile_size: usize,
    pub resize_policy: ResizePolicy,
    pub eval_downscale: usize,
    /// Tiles per forward pass.
    pub batch_tiles: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            tile_size: 256,
            resize_policy: ResizePolicy::NearestMultiple,
            eval_downscale: 2,
            batch_tiles: 4,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(32) {
            return Err(Error::config("tile_size", "must be a positive multiple of 32"));
        }
        if self.eval_downscale == 0 {
            return Err(Error::config("eval_downscale", "must be at least 1"));
        }
        if self.batch_tiles == 0 {
            return Err(Error::config("batch_tiles", "must be positive"));
        }
        Ok(())
    }
}

fn align(d: usize, t: usize, policy: ResizePolicy) -> usize {
    let n = match policy {
        ResizePolicy::NearestMultiple => (2 * d + t) / (2 * t),
        ResizePolicy::CeilMultiple => d.div_ceil(t),
    };
    n.max(1) * t
}

pub fn aligned_size(w: usize, h: usize, cfg: &TileConfig) -> (usize, usize) {
    (
        align(w, cfg.tile_size, cfg.resize_policy),
        align(h, cfg.tile_size, cfg.resize_policy),
    )
}

/// Cuts an `(H, W, C)` tensor with tile-aligned sides into row-major
/// `(tile, tile, C)` tensors.
pub fn split_tiles(t: &Tensor, tile: usize) -> Result<Vec<Tensor>> {
    let s = t.shape();
    if tile == 0 || s.len() != 3 || !s[0].is_multiple_of(tile) || !s[1].is_multiple_of(tile) {
        return Err(Error::Shape(format!(
            "{s:?} is not an (H, W, C) tensor aligned to {tile}"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = Vec::with_capacity((h / tile) * (w / tile));
    for ty in 0..h / tile {
        for tx in 0..w / tile {
            let mut d = Vec::with_capacity(tile * tile * c);
            for y in 0..tile {
                let row = ((ty * tile + y) * w + tx * tile) * c;
                d.extend_from_slice(&src[row..row + tile * c]);
            }
            out.push(Tensor::from_vec(&[tile, tile, c], d)?);
        }
    }
    Ok(out)
}

/// Inverse of [`split_tiles`].
pub fn stitch_tiles(tiles: &[Tensor], w: usize, h: usize, tile: usize) -> Result<Tensor> {
    if tile == 0 || !w.is_multiple_of(tile) || !h.is_multiple_of(tile) || tiles.len() != (w / tile) * (h / tile) {
        return Err(Error::Shape(format!(
            "{} tiles of {tile} px cannot cover {w}x{h}",
            tiles.len()
        )));
    }
    let c = tiles.first().map_or(1, |t| t.shape()[2]);
    let mut out = vec![0f32; w * h * c];
    let per_row = w / tile;
    for (i, t) in tiles.iter().enumerate() {
        if t.shape() != [tile, tile, c] {
            return Err(Error::Shape(format!("tile {i} has shape {:?}", t.shape())));
        }
        let (tx, ty) = (i % per_row, i / per_row);
        for y in 0..tile {
            let dst = ((ty * tile + y) * w + tx * tile) * c;
            out[dst..dst + tile * c].copy_from_slice(&t.data()[y * tile * c..(y + 1) * tile * c]);
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Stitched prediction at the aligned size.
#[derive(Debug, Clone)]
pub struct SlidePrediction {
    pub mask: ClassMask,
    /// `(H', W', C)` class probabilities.
    pub probs: Tensor,
    pub aligned: (usize, usize),
}

impl SlidePrediction {
    /// The argmax map resized (nearest neighbour) to `w`×`h`.
    pub fn mask_at(&self, w: usize, h: usize) -> ClassMask {
        raster::resize_mask(&self.mask, w, h)
    }
}

/// Predicts a whole slide tile by tile.
pub fn predict_slide(model: &SegModel, image: &RgbImage, cfg: &TileConfig) -> Result<SlidePrediction> {
    cfg.validate()?;
    if !cfg.tile_size.is_multiple_of(model.config().stride()) {
        return Err(Error::config(
            "tile_size",
            format!("must be a multiple of the model stride {}", model.config().stride()),
        ));
    }
    let (w, h) = aligned_size(image.width() as usize, image.height() as usize, cfg);
    let resized = if (w, h) == (image.width() as usize, image.height() as usize) {
        image.clone()
    } else {
        raster::resize_rgb(image, w, h)
    };
    let input = Tensor::from_vec(&[h, w, 3], normalize_rgb(resized.as_raw()))?;
    let tiles = split_tiles(&input, cfg.tile_size)?;
    let mut prob_tiles = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(cfg.batch_tiles) {
        let batch = Tensor::stack(chunk)?;
        let probs = model.forward_any_size(&batch)?;
        for i in 0..chunk.len() {
            let t = probs.batch_item(i);
            let s = t.shape().to_vec();
            prob_tiles.push(t.reshape(&s[1..]));
        }
    }
    let probs = stitch_tiles(&prob_tiles, w, h, cfg.tile_size)?;
    let mask = ClassMask::new(w, h, probs.argmax_last())?;
    Ok(SlidePrediction {
        mask,
        probs,
        aligned: (w, h),
    })
}

/// Downscales prediction and ground truth by `eval_downscale` with nearest
/// neighbour; output sides are `floor(side / factor)`.
pub fn eval_pair(gt: &ClassMask, pred: &ClassMask, cfg: &TileConfig) -> Result<(ClassMask, ClassMask)> {
    if gt.dims() != pred.dims() {
        return Err(Error::DimensionMismatch {
            what: "prediction vs ground truth".into(),
            expected: gt.dims(),
            found: pred.dims(),
        });
    }
    let f = cfg.eval_downscale.max(1);
    let (w, h) = gt.dims();
    let (ow, oh) = ((w / f).max(1), (h / f).max(1));
    Ok((raster::resize_mask(pred, ow, oh), raster::resize_mask(gt, ow, oh)))
}

/// Full evaluation protocol for one slide: tiled prediction, resize back to
/// the slide size, halve, count.
pub fn evaluate_slide(model: &SegModel, image: &RgbImage, gt: &ClassMask, cfg: &TileConfig) -> Result<ConfusionCounts> {
    let pred = predict_slide(model, image, cfg)?;
    let (w, h) = gt.dims();
    let (p, g) = eval_pair(gt, &pred.mask_at(w, h), cfg)?;
    metrics::count(&p, &g, model.config().num_classes)
}
