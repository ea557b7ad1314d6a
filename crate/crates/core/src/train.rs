//! Segmentation training: staircase learning-rate schedule, rotation/flip
//! augmentation, mini-batch Adam, per-epoch validation and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClassMask;
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts, MetricVector};
use crate::nn::{loss, Adam, Graph, Tensor};
use crate::raster;
use crate::sampler::{self, PatchRow};
use crate::seg::{normalize_rgb, FinalActivation, SegModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Dice,
    /// Cross-entropy plus soft Dice.
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rot90: bool,
    pub flip_ud: bool,
    pub flip_lr: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot90: true,
            flip_ud: true,
            flip_lr: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub loss: LossKind,
    pub augment: AugmentConfig,
    /// Weight classes by inverse training-pixel frequency (cross-entropy only).
    pub class_weights: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 6,
            base_lr: 0.001,
            decay_rate: 0.96,
            decay_steps: 50_000,
            loss: LossKind::CrossEntropy,
            augment: AugmentConfig::default(),
            class_weights: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("decay_rate", "must lie in (0, 1]"));
        }
        if self.decay_steps == 0 {
            return Err(Error::config("decay_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Staircase decay: `base_lr * decay_rate ^ floor(step / decay_steps)`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay_rate.powi((step / cfg.decay_steps) as i32)
}

/// A rotation by `k * 90` degrees counter-clockwise followed by optional
/// up-down and left-right flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub k: u8,
    pub flip_ud: bool,
    pub flip_lr: bool,
}

impl Augmentation {
    pub fn draw<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let k = rng.gen_range(0..4u8);
        let ud = rng.gen_bool(0.5);
        let lr = rng.gen_bool(0.5);
        Augmentation {
            k: if cfg.rot90 { k } else { 0 },
            flip_ud: cfg.flip_ud && ud,
            flip_lr: cfg.flip_lr && lr,
        }
    }

    pub fn from_seed(seed: u64, cfg: &AugmentConfig) -> Self {
        Self::draw(&mut ChaCha8Rng::seed_from_u64(seed), cfg)
    }

    pub fn is_identity(&self) -> bool {
        *self == Augmentation::default()
    }

    /// Output dimensions for a `w`×`h` input.
    pub fn out_dims(&self, w: usize, h: usize) -> (usize, usize) {
        if self.k % 2 == 1 {
            (h, w)
        } else {
            (w, h)
        }
    }

    /// Destination of source pixel `(x, y)`.
    fn map(&self, mut x: usize, mut y: usize, w: usize, h: usize) -> (usize, usize) {
        let (mut cw, mut ch) = (w, h);
        for _ in 0..self.k {
            // counter-clockwise quarter turn
            (x, y) = (y, cw - 1 - x);
            (cw, ch) = (ch, cw);
        }
        if self.flip_ud {
            y = ch - 1 - y;
        }
        if self.flip_lr {
            x = cw - 1 - x;
        }
        (x, y)
    }

    /// Permutes an interleaved `w`×`h`×`c` buffer.
    pub fn apply<T: Copy + Default>(&self, data: &[T], w: usize, h: usize, c: usize) -> Vec<T> {
        assert_eq!(data.len(), w * h * c, "buffer does not match dimensions");
        if self.is_identity() {
            return data.to_vec();
        }
        let (ow, _) = self.out_dims(w, h);
        let mut out = vec![T::default(); data.len()];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = self.map(x, y, w, h);
                let (s, d) = ((y * w + x) * c, (ny * ow + nx) * c);
                out[d..d + c].copy_from_slice(&data[s..s + c]);
            }
        }
        out
    }
}

/// Applies one random transform, drawn from `seed`, to an image and its mask.
pub fn augment(image: &RgbImage, mask: &ClassMask, seed: u64, cfg: &AugmentConfig) -> Result<(RgbImage, ClassMask)> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if (w, h) != mask.dims() {
        return Err(Error::DimensionMismatch {
            what: "augmented image vs mask".into(),
            expected: (w, h),
            found: mask.dims(),
        });
    }
    let aug = Augmentation::from_seed(seed, cfg);
    let (ow, oh) = aug.out_dims(w, h);
    let img = RgbImage::from_raw(ow as u32, oh as u32, aug.apply(image.as_raw(), w, h, 3)).expect("same length");
    let m = ClassMask::new(ow, oh, aug.apply(mask.as_slice(), w, h, 1))?;
    Ok((img, m))
}

/// Square patches in memory: normalised RGB plus class ids.
#[derive(Debug, Clone, Default)]
pub struct PatchSet {
    pub size: usize,
    pub images: Vec<Vec<f32>>,
    pub masks: Vec<Vec<u8>>,
}

impl PatchSet {
    pub fn new(size: usize) -> Self {
        PatchSet {
            size,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Adds a patch, resizing it to `self.size` if needed (bilinear for the
    /// image, nearest neighbour for the mask).
    pub fn push(&mut self, image: &RgbImage, mask: &ClassMask) -> Result<()> {
        let dims = (image.width() as usize, image.height() as usize);
        if dims != mask.dims() || dims.0 != dims.1 {
            return Err(Error::Shape(format!(
                "patch image {dims:?} and mask {:?} must be equal squares",
                mask.dims()
            )));
        }
        let s = self.size;
        if dims.0 == s {
            self.images.push(normalize_rgb(image.as_raw()));
            self.masks.push(mask.as_slice().to_vec());
        } else {
            self.images
                .push(normalize_rgb(raster::resize_rgb(image, s, s).as_raw()));
            self.masks.push(raster::resize_mask(mask, s, s).into_raw());
        }
        Ok(())
    }

    /// Loads the patches listed in an index written by
    /// [`sampler::materialize_patches`], keeping rows whose slide passes `keep`.
    pub fn load_index(dir: &Path, size: usize, keep: impl Fn(&PatchRow) -> bool) -> Result<Self> {
        let rows = sampler::read_index(&dir.join(sampler::INDEX_FILE))?;
        let mut set = PatchSet::new(size);
        for r in rows.iter().filter(|r| keep(r)) {
            let img = raster::read_rgb(&dir.join(&r.image_file))?;
            let mask = raster::read_mask(&dir.join(&r.mask_file))?;
            set.push(&img, &mask)?;
        }
        Ok(set)
    }

    /// Grid-cuts whole slides into non-overlapping tiles (validation style).
    pub fn from_grid(slides: &[(RgbImage, ClassMask)], size: usize) -> Result<Self> {
        let mut set = PatchSet::new(size);
        for (img, mask) in slides {
            let imgs = sampler::grid_cut_rgb(img, size);
            let masks = sampler::grid_cut_mask(mask, size);
            for (i, m) in imgs.iter().zip(&masks) {
                set.push(&i.data, &m.data)?;
            }
        }
        Ok(set)
    }

    pub fn class_histogram(&self, n_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; n_classes];
        for m in &self.masks {
            for &c in m {
                if (c as usize) < n_classes {
                    h[c as usize] += 1;
                }
            }
        }
        h
    }

    fn max_class(&self) -> u8 {
        self.masks.iter().flat_map(|m| m.iter().copied()).max().unwrap_or(0)
    }

    fn batch(&self, idx: &[usize], augs: &[Augmentation]) -> (Tensor, Vec<u8>) {
        let s = self.size;
        let mut x = Vec::with_capacity(idx.len() * s * s * 3);
        let mut y = Vec::with_capacity(idx.len() * s * s);
        for (&i, aug) in idx.iter().zip(augs) {
            x.extend(aug.apply(&self.images[i], s, s, 3));
            y.extend(aug.apply(&self.masks[i], s, s, 1));
        }
        (Tensor::from_vec(&[idx.len(), s, s, 3], x).expect("batch shape"), y)
    }
}

/// Inverse-frequency weights normalised to mean 1; absent classes get 0.
pub fn inverse_frequency_weights(hist: &[u64]) -> Vec<f32> {
    let total: u64 = hist.iter().sum();
    let present = hist.iter().filter(|&&n| n > 0).count().max(1);
    let raw: Vec<f64> = hist
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { total as f64 / n as f64 })
        .collect();
    let mean = raw.iter().sum::<f64>() / present as f64;
    raw.iter().map(|&r| (r / mean) as f32).collect()
}

/// Loss value and gradient w.r.t. the head output.
fn loss_and_grad(
    model: &SegModel,
    logits: &Tensor,
    y: &[u8],
    cfg: &TrainConfig,
    weights: Option<&[f32]>,
) -> (f32, Tensor) {
    if model.config().final_activation == FinalActivation::Sigmoid {
        let t: Vec<f32> = y.iter().map(|&c| (c == 1) as u8 as f32).collect();
        return loss::bce_with_logits(logits, &t);
    }
    match cfg.loss {
        LossKind::CrossEntropy => loss::softmax_cross_entropy(logits, y, weights),
        LossKind::Dice => loss::soft_dice(logits, y),
        LossKind::Combined => {
            let (a, mut ga) = loss::softmax_cross_entropy(logits, y, weights);
            let (b, gb) = loss::soft_dice(logits, y);
            ga.data_mut().iter_mut().zip(gb.data()).for_each(|(g, d)| *g += d);
            (a + b, ga)
        }
    }
}

/// Mean loss over a patch set, inference mode, no augmentation.
pub fn evaluate_loss(model: &SegModel, set: &PatchSet, cfg: &TrainConfig) -> Result<f32> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(cfg.batch_size.max(1)) {
        let augs = vec![Augmentation::default(); chunk.len()];
        let (x, y) = set.batch(chunk, &augs);
        let mut g = Graph::new(model.store(), false);
        let xi = g.input(x);
        let z = model.logits(&mut g, xi);
        let (l, _) = loss_and_grad(model, g.value(z), &y, cfg, None);
        total += l * chunk.len() as f32;
        n += chunk.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f32 })
}

/// Micro-aggregated confusion counts of the model's argmax over a patch set.
pub fn evaluate_counts(model: &SegModel, set: &PatchSet, batch_size: usize) -> Result<ConfusionCounts> {
    let n_classes = model.config().num_classes;
    let s = set.size;
    let mut counts = ConfusionCounts::zeros(n_classes);
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let augs = vec![Augmentation::default(); chunk.len()];
        let (x, y) = set.batch(chunk, &augs);
        let probs = model.forward_any_size(&x)?;
        let pred = probs.argmax_last();
        for (i, _) in chunk.iter().enumerate() {
            let px = s * s;
            let p = ClassMask::new(s, s, pred[i * px..(i + 1) * px].to_vec())?;
            let t = ClassMask::new(s, s, y[i * px..(i + 1) * px].to_vec())?;
            counts += metrics::count(&p, &t, n_classes)?;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_iou: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mean_iou: f64,
    pub steps: u64,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// Where training writes checkpoints and history, and whether to resume.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    pub resume: bool,
}

/// Trains `model` in place on `train`, selecting the best epoch by validation
/// Mean-IoU on `val` (which may be empty, in which case the last epoch wins).
///
/// With `out.resume` set, the model, optimiser state and history are restored
/// from `last.ckpt` and `history.csv` in `out.dir`, and training continues
/// from the next epoch with the step counter intact.
pub fn train_segmentation(
    model: &mut SegModel,
    train: &PatchSet,
    val: &PatchSet,
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Runtime("training set is empty".into()));
    }
    let n_classes = model.config().num_classes;
    for set in [train, val] {
        if !set.is_empty() && set.max_class() as usize >= n_classes {
            return Err(Error::ClassOutOfRange {
                id: set.max_class(),
                n_classes,
            });
        }
    }
    if !train.size.is_multiple_of(model.config().stride()) {
        return Err(Error::Shape(format!(
            "patch size {} is not a multiple of the model stride {}",
            train.size,
            model.config().stride()
        )));
    }
    if let Some(d) = &out.dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut adam = Adam::new(model.store());
    let mut history = Vec::new();
    if out.resume {
        let dir = out
            .dir
            .as_ref()
            .ok_or_else(|| Error::config("resume", "needs an output directory"))?;
        let (m, a) = SegModel::load(&dir.join(LAST_CHECKPOINT), Some(model.config()))?;
        *model = m;
        adam = a.ok_or_else(|| Error::Checkpoint("last checkpoint carries no optimiser state".into()))?;
        history = read_history(&dir.join(HISTORY_FILE))?;
    }
    let (mut best_epoch, mut best) = history
        .iter()
        .map(|r: &EpochRecord| (r.epoch, r.val_mean_iou))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });

    let weights = cfg
        .class_weights
        .then(|| inverse_frequency_weights(&train.class_histogram(n_classes)));
    // `epochs` counts the total, so a resumed run only does the remainder
    for epoch in history.len() + 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let augs: Vec<Augmentation> = chunk
                .iter()
                .map(|_| Augmentation::draw(&mut rng, &cfg.augment))
                .collect();
            let (x, y) = train.batch(chunk, &augs);
            let lr = lr_at(adam.step_count(), cfg);
            let (l, grads, updates) = {
                let mut g = Graph::new(model.store(), true);
                let xi = g.input(x);
                let z = model.logits(&mut g, xi);
                let (l, dz) = loss_and_grad(model, g.value(z), &y, cfg, weights.as_deref());
                let grads = g.backward(z, dz);
                (l, grads, g.into_bn_updates())
            };
            if !l.is_finite() {
                return Err(Error::Runtime(format!("loss became {l} at epoch {epoch}")));
            }
            model.store_mut().apply_bn_updates(&updates);
            adam.step(model.store_mut(), &grads, lr);
            loss_sum += l as f64;
            batches += 1;
        }
        let val_miou = if val.is_empty() {
            f64::NAN
        } else {
            MetricVector::from_counts(&evaluate_counts(model, val, cfg.batch_size)?.aggregate()).mean_iou
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mean_iou: val_miou,
            lr: lr_at(adam.step_count(), cfg),
            seconds: t0.elapsed().as_secs_f64(),
        };
        let val_note = if val.is_empty() {
            String::new()
        } else {
            format!(", val mIoU {:.4}", rec.val_mean_iou)
        };
        log::info!(
            "epoch {epoch}: loss {:.4}{val_note}, {:.1}s",
            rec.train_loss,
            rec.seconds
        );
        let improved = val.is_empty() || val_miou > best;
        if improved {
            best = if val.is_empty() { best } else { val_miou };
            best_epoch = epoch;
        }
        history.push(rec);
        if let Some(d) = &out.dir {
            if improved {
                model.save(&d.join(BEST_CHECKPOINT), None)?;
            }
            model.save(&d.join(LAST_CHECKPOINT), Some(&adam))?;
            write_history(&d.join(HISTORY_FILE), &history)?;
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_mean_iou: best,
        steps: adam.step_count(),
    })
}

pub fn write_history(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|x| x.map_err(err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(49_999, &cfg), 0.001);
        assert_eq!(lr_at(50_000, &cfg), 0.001 * 0.96);
        assert_eq!(lr_at(100_000, &cfg), 0.001 * 0.96 * 0.96);
    }

    #[test]
    fn identity_augmentation() {
        let a = Augmentation::default();
        let data: Vec<u8> = (0..12).collect();
        assert_eq!(a.apply(&data, 4, 3, 1), data);
    }

    #[test]
    fn quarter_turn_by_hand() {
        // 2x3 (w=3, h=2):  0 1 2 / 3 4 5  -> ccw: 2 5 / 1 4 / 0 3
        let a = Augmentation {
            k: 1,
            ..Default::default()
        };
        assert_eq!(a.apply(&[0u8, 1, 2, 3, 4, 5], 3, 2, 1), vec![2, 5, 1, 4, 0, 3]);
        let ud = Augmentation {
            flip_ud: true,
            ..Default::default()
        };
        assert_eq!(ud.apply(&[0u8, 1, 2, 3, 4, 5], 3, 2, 1), vec![3, 4, 5, 0, 1, 2]);
        let lr = Augmentation {
            flip_lr: true,
            ..Default::default()
        };
        assert_eq!(lr.apply(&[0u8, 1, 2, 3, 4, 5], 3, 2, 1), vec![2, 1, 0, 5, 4, 3]);
    }

    #[test]
    fn half_turn_with_both_flips_is_identity() {
        let a = Augmentation {
            k: 2,
            flip_ud: true,
            flip_lr: true,
        };
        let data: Vec<u16> = (0..5 * 4 * 2).collect();
        assert_eq!(a.apply(&data, 5, 4, 2), data);
        let twice = a.apply(&a.apply(&data, 5, 4, 2), 5, 4, 2);
        assert_eq!(twice, data);
    }

    #[test]
    fn inverse_frequency() {
        let w = inverse_frequency_weights(&[90, 10, 0]);
        assert!((w[0] + w[1] - 2.0).abs() < 1e-6);
        assert!((w[1] / w[0] - 9.0).abs() < 1e-5);
        assert_eq!(w[2], 0.0);
    }

    proptest! {
        #[test]
        fn augmentation_preserves_mask_histogram(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let data: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..3)).collect();
            let mask = ClassMask::new(w, h, data).unwrap();
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb([x as u8, y as u8, 0]));
            let (ai, am) = augment(&img, &mask, seed, &AugmentConfig::default()).unwrap();
            prop_assert_eq!(am.histogram(3), mask.histogram(3));
            // image and mask receive the same permutation
            for (p, &c) in ai.pixels().zip(am.as_slice()) {
                prop_assert_eq!(mask.get(p.0[0] as usize, p.0[1] as usize), c);
            }
        }
    }
}
