//! Slide-level MF-versus-eczema classification.
//!
//! The network sees a downscaled slide, optionally concatenated with the
//! segmentation model's class probabilities, and passes it through four
//! conv/ReLU/max-pool modules and two fully connected layers. Two heads are
//! available: a single sigmoid unit trained with binary cross-entropy, and a
//! two-unit head trained with the cosine loss against one-hot targets.
//! Evaluation is patient-grouped k-fold cross-validation with MF as the
//! positive class.

use std::fmt::Write as _;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, Disease, Manifest, SplitCell, SplitSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{self, percent, ClassCounts, MeanStd};
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{loss, Adam, Graph, ParamStore, Tensor, Var};
use crate::raster;
use crate::seg::{normalize_rgb, SegModel};
use crate::tiling::{predict_slide, TileConfig};
use crate::train::{lr_at, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClfLoss {
    Bce,
    Cosine,
}

impl ClfLoss {
    pub fn label(self) -> &'static str {
        match self {
            ClfLoss::Bce => "Binary Cross Entropy",
            ClfLoss::Cosine => "Cosine Similarity",
        }
    }
}

impl std::str::FromStr for ClfLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bce" => Ok(ClfLoss::Bce),
            "cosine" => Ok(ClfLoss::Cosine),
            other => Err(format!("expected `bce` or `cosine`, found `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClfConfig {
    pub with_seg_map: bool,
    pub loss: ClfLoss,
    pub input_size: usize,
    pub conv_channels: [usize; 4],
    pub fc_hidden: usize,
    pub threshold: f64,
    pub folds: usize,
    pub seed: u64,
    /// Class count of the segmentation model feeding the extra channels.
    pub seg_classes: usize,
    /// Feed one-hot argmax maps instead of probabilities.
    pub hard_labels: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
}

impl Default for ClfConfig {
    fn default() -> Self {
        ClfConfig {
            with_seg_map: true,
            loss: ClfLoss::Bce,
            input_size: 256,
            conv_channels: [16, 32, 64, 128],
            fc_hidden: 128,
            threshold: 0.5,
            folds: 5,
            seed: 0,
            seg_classes: NUM_CLASSES,
            hard_labels: false,
            epochs: 20,
            batch_size: 4,
            base_lr: 0.001,
        }
    }
}

impl ClfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::config("input_size", "must be a positive multiple of 16"));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::config("conv_channels", "must all be positive"));
        }
        if self.fc_hidden == 0 {
            return Err(Error::config("fc_hidden", "must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must lie in (0, 1)"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds", "must be at least 2"));
        }
        if self.seg_classes < 2 {
            return Err(Error::config("seg_classes", "must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        3 + if self.with_seg_map { self.seg_classes } else { 0 }
    }

    fn schedule(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            ..TrainConfig::default()
        }
    }
}

/// Index of a diagnosis in the two-unit head; MF is the positive class.
fn class_index(d: Disease) -> usize {
    match d {
        Disease::Eczema => 0,
        Disease::Mf => 1,
    }
}

pub struct Classifier {
    cfg: ClfConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    fc: Linear,
    head: Linear,
}

/// Builds a freshly initialised classifier; weights are drawn from `seed`.
pub fn build_classifier(cfg: &ClfConfig, seed: u64) -> Result<Classifier> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cin = cfg.in_channels();
    let mut convs = Vec::new();
    for (i, &c) in cfg.conv_channels.iter().enumerate() {
        convs.push(Conv2d::new(
            &mut store,
            &format!("conv{i}"),
            cin,
            c,
            3,
            1,
            true,
            &mut rng,
        ));
        cin = c;
    }
    let side = cfg.input_size / 16;
    let fc = Linear::new(&mut store, "fc", side * side * cin, cfg.fc_hidden, &mut rng);
    let out = match cfg.loss {
        ClfLoss::Bce => 1,
        ClfLoss::Cosine => 2,
    };
    let head = Linear::new_head(&mut store, "head", cfg.fc_hidden, out, &mut rng);
    Ok(Classifier {
        cfg: cfg.clone(),
        store,
        convs,
        fc,
        head,
    })
}

impl Classifier {
    pub fn config(&self) -> &ClfConfig {
        &self.cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Channels the first convolution consumes.
    pub fn in_channels(&self) -> usize {
        self.convs[0].cin
    }

    /// Pre-activation head output, `(n, 1)` or `(n, 2)`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Var {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(g, y);
            y = g.relu(y);
            y = g.max_pool2(y);
        }
        y = g.flatten(y);
        y = self.fc.forward(g, y);
        y = g.relu(y);
        self.head.forward(g, y)
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = self.cfg.input_size;
        let want = [s, s, self.in_channels()];
        if batch.shape().len() != 4 || batch.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "classifier expects (n, {s}, {s}, {}), got {:?}",
                want[2],
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Sigmoid scores `(n, 1)` for the BCE head, unit-norm vectors `(n, 2)`
    /// for the cosine head.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut g = Graph::new(&self.store, false);
        let xi = g.input(batch.clone());
        let z = self.logits(&mut g, xi);
        let mut out = g.value(z).clone();
        match self.cfg.loss {
            ClfLoss::Bce => out.data_mut().iter_mut().for_each(|v| *v = loss::sigmoid(*v)),
            ClfLoss::Cosine => {
                for row in out.data_mut().chunks_exact_mut(2) {
                    let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(loss::COSINE_EPS);
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        Ok(out)
    }

    /// MF when the score reaches the threshold (BCE) or the MF unit wins
    /// (cosine).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Disease>> {
        let out = self.forward(batch)?;
        Ok(match self.cfg.loss {
            ClfLoss::Bce => out
                .data()
                .iter()
                .map(|&p| {
                    if p as f64 >= self.cfg.threshold {
                        Disease::Mf
                    } else {
                        Disease::Eczema
                    }
                })
                .collect(),
            ClfLoss::Cosine => out
                .data()
                .chunks_exact(2)
                .map(|r| if r[1] > r[0] { Disease::Mf } else { Disease::Eczema })
                .collect(),
        })
    }
}

/// Averages every source pixel whose centre falls into each destination
/// cell; falls back to nearest neighbour when upsampling.
fn resize_channels(t: &Tensor, w: usize, h: usize) -> Tensor {
    let (sh, sw, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if (sw, sh) == (w, h) {
        return t.clone();
    }
    let range = |o: usize, n: usize, s: usize| {
        let a = o * s / n;
        let b = ((o + 1) * s / n).max(a + 1);
        a..b
    };
    let src = t.data();
    let mut out = vec![0f32; w * h * c];
    for oy in 0..h {
        let ys = range(oy, h, sh);
        for ox in 0..w {
            let xs = range(ox, w, sw);
            let cell = &mut out[(oy * w + ox) * c..(oy * w + ox + 1) * c];
            for y in ys.clone() {
                for x in xs.clone() {
                    let p = &src[(y * sw + x) * c..(y * sw + x + 1) * c];
                    cell.iter_mut().zip(p).for_each(|(o, v)| *o += v);
                }
            }
            let n = (ys.len() * xs.len()) as f32;
            cell.iter_mut().for_each(|o| *o /= n);
        }
    }
    Tensor::from_vec(&[h, w, c], out).expect("resize shape")
}

fn one_hot_argmax(t: &Tensor) -> Tensor {
    let c = t.shape()[2];
    let mut out = vec![0f32; t.len()];
    for (k, &a) in t.argmax_last().iter().enumerate() {
        out[k * c + a as usize] = 1.0;
    }
    Tensor::from_vec(t.shape(), out).expect("one-hot shape")
}

/// Classifier input for one slide: the image resized to `input_size`² and
/// normalised to [-1, 1], followed by the segmentation model's tiled class
/// probabilities averaged down to the same size when `seg` is given.
///
/// Only the slide image is read; ground-truth masks play no part.
pub fn prepare_input(image: &RgbImage, seg: Option<&SegModel>, cfg: &ClfConfig, tiles: &TileConfig) -> Result<Tensor> {
    let s = cfg.input_size;
    let small = raster::resize_rgb(image, s, s);
    let rgb = Tensor::from_vec(&[s, s, 3], normalize_rgb(small.as_raw()))?;
    let Some(seg) = seg else {
        if cfg.with_seg_map {
            return Err(Error::MissingPrerequisite {
                artifact: "segmentation checkpoint".into(),
                command: "train-seg".into(),
            });
        }
        return Ok(rgb);
    };
    let pred = predict_slide(seg, image, tiles)?;
    let mut probs = resize_channels(&pred.probs, s, s);
    if cfg.hard_labels {
        probs = one_hot_argmax(&probs);
    }
    let c = probs.shape()[2];
    let mut out = Vec::with_capacity(s * s * (3 + c));
    for (a, b) in rgb.data().chunks_exact(3).zip(probs.data().chunks_exact(c)) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    Tensor::from_vec(&[s, s, 3 + c], out)
}

/// Prepared inputs for every slide of a manifest, in manifest order. When a
/// segmentation model is supplied each tensor carries its probability
/// channels, and both ablation arms are served from the same cache.
#[derive(Debug, Clone)]
pub struct ClfDataset {
    pub slide_ids: Vec<String>,
    pub labels: Vec<Disease>,
    pub inputs: Vec<Tensor>,
    pub seg_channels: usize,
}

impl ClfDataset {
    pub fn prepare(manifest: &Manifest, seg: Option<&SegModel>, cfg: &ClfConfig, tiles: &TileConfig) -> Result<Self> {
        let probe = ClfConfig {
            with_seg_map: seg.is_some(),
            ..cfg.clone()
        };
        let inputs = manifest
            .slides
            .par_iter()
            .map(|rec| {
                let img = raster::read_rgb(&manifest.image_path(rec))?;
                prepare_input(&img, seg, &probe, tiles)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClfDataset {
            slide_ids: manifest.slides.iter().map(|r| r.slide_id.clone()).collect(),
            labels: manifest.slides.iter().map(|r| r.disease).collect(),
            seg_channels: seg.map_or(0, |m| m.config().num_classes),
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stacked `(n, s, s, c)` batch, keeping only the RGB channels unless
    /// `with_seg_map`.
    fn batch(&self, idx: &[usize], with_seg_map: bool) -> Result<Tensor> {
        if with_seg_map && self.seg_channels == 0 {
            return Err(Error::MissingPrerequisite {
                artifact: "segmentation checkpoint".into(),
                command: "train-seg".into(),
            });
        }
        let full = 3 + self.seg_channels;
        let keep = if with_seg_map { full } else { 3 };
        let s = self.inputs[idx[0]].shape()[0];
        let mut data = Vec::with_capacity(idx.len() * s * s * keep);
        for &i in idx {
            for px in self.inputs[i].data().chunks_exact(full) {
                data.extend_from_slice(&px[..keep]);
            }
        }
        Tensor::from_vec(&[idx.len(), s, s, keep], data)
    }
}

/// Accuracy, precision, recall and F1 with MF as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BinaryMetrics {
    pub const NAMES: [&'static str; 4] = ["accuracy", "precision", "recall", "f1"];

    pub fn from_counts(c: &ClassCounts) -> Self {
        BinaryMetrics {
            accuracy: metrics::accuracy(c),
            precision: metrics::precision(c),
            recall: metrics::recall(c),
            f1: metrics::f1(c),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

/// Confusion counts with MF positive.
pub fn binary_counts(pred: &[Disease], truth: &[Disease]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == Disease::Mf, t == Disease::Mf) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_slides: Vec<String>,
    pub counts: ClassCounts,
    pub metrics: BinaryMetrics,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFold {
    pub fold: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub loss: ClfLoss,
    pub with_seg_map: bool,
    pub folds: Vec<FoldResult>,
    pub skipped: Vec<SkippedFold>,
    /// Mean and std over evaluated folds, in [`BinaryMetrics::NAMES`] order.
    pub summary: Vec<MeanStd>,
}

impl CvResult {
    pub fn label(&self) -> String {
        format!(
            "{} {} Segmentation Map",
            self.loss.label(),
            if self.with_seg_map { "with" } else { "w/o" }
        )
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.summary[0].mean
    }
}

/// Trains a classifier on the given slides and returns the mean loss of each
/// epoch.
pub fn fit(model: &mut Classifier, data: &ClfDataset, train_idx: &[usize], seed: u64) -> Result<Vec<f64>> {
    let cfg = model.cfg.clone();
    if train_idx.is_empty() {
        return Err(Error::Runtime("no training slides".into()));
    }
    let sched = cfg.schedule();
    let mut adam = Adam::new(&model.store);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order = train_idx.to_vec();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.batch(chunk, cfg.with_seg_map)?;
            model.check_input(&x)?;
            let (l, grads) = {
                let mut g = Graph::new(&model.store, true);
                let xi = g.input(x);
                let z = model.logits(&mut g, xi);
                let (l, dz) = match cfg.loss {
                    ClfLoss::Bce => {
                        let t: Vec<f32> = chunk.iter().map(|&i| class_index(data.labels[i]) as f32).collect();
                        loss::bce_with_logits(g.value(z), &t)
                    }
                    ClfLoss::Cosine => {
                        let mut t = vec![0f32; chunk.len() * 2];
                        for (k, &i) in chunk.iter().enumerate() {
                            t[k * 2 + class_index(data.labels[i])] = 1.0;
                        }
                        loss::cosine_loss_batch(g.value(z), &t)
                    }
                };
                (l, g.backward(z, dz))
            };
            if !l.is_finite() {
                return Err(Error::Runtime(format!("classifier loss became {l} at epoch {epoch}")));
            }
            adam.step(&mut model.store, &grads, lr_at(adam.step_count(), &sched));
            total += l as f64 * chunk.len() as f64;
        }
        losses.push(total / order.len() as f64);
    }
    Ok(losses)
}

fn predict_indices(model: &Classifier, data: &ClfDataset, idx: &[usize]) -> Result<Vec<Disease>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(model.cfg.batch_size) {
        out.extend(model.predict(&data.batch(chunk, model.cfg.with_seg_map)?)?);
    }
    Ok(out)
}

/// Cross-validation over the folds of `split`: each fold is held out once
/// while a fresh model trains on the rest. Folds whose training or test part
/// lacks a diagnosis are skipped and listed.
pub fn run_cv(data: &ClfDataset, split: &SplitSpec, cfg: &ClfConfig) -> Result<CvResult> {
    cfg.validate()?;
    let k = split
        .folds
        .ok_or_else(|| Error::Split("cross-validation needs a fold split, not train/val/test".into()))?;
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for fold in 0..k {
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for (i, id) in data.slide_ids.iter().enumerate() {
            match split.cell_of(id) {
                Some(SplitCell::Fold(f)) if f == fold => test_idx.push(i),
                Some(SplitCell::Fold(_)) => train_idx.push(i),
                _ => return Err(Error::Split(format!("slide {id} has no fold"))),
            }
        }
        let lacks = |idx: &[usize]| {
            [Disease::Mf, Disease::Eczema]
                .into_iter()
                .find(|d| !idx.iter().any(|&i| data.labels[i] == *d))
        };
        if let Some((part, d)) = lacks(&train_idx)
            .map(|d| ("training", d))
            .or_else(|| lacks(&test_idx).map(|d| ("test", d)))
        {
            let reason = format!("{part} part has no {} slide", d.as_str());
            log::warn!("skipping fold {fold}: {reason}");
            skipped.push(SkippedFold { fold, reason });
            continue;
        }
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64);
        let mut model = build_classifier(cfg, seed)?;
        let epoch_losses = fit(&mut model, data, &train_idx, seed)?;
        let pred = predict_indices(&model, data, &test_idx)?;
        let truth: Vec<Disease> = test_idx.iter().map(|&i| data.labels[i]).collect();
        let counts = binary_counts(&pred, &truth);
        log::info!(
            "{} fold {fold}: accuracy {:.3}",
            if cfg.with_seg_map { "with map" } else { "without map" },
            metrics::accuracy(&counts)
        );
        folds.push(FoldResult {
            fold,
            test_slides: test_idx.iter().map(|&i| data.slide_ids[i].clone()).collect(),
            counts,
            metrics: BinaryMetrics::from_counts(&counts),
            epoch_losses,
        });
    }
    if folds.is_empty() {
        return Err(Error::Split("every fold lacked a diagnosis".into()));
    }
    let summary = (0..4)
        .map(|m| MeanStd::of(&folds.iter().map(|f| f.metrics.values()[m]).collect::<Vec<_>>()))
        .collect();
    Ok(CvResult {
        loss: cfg.loss,
        with_seg_map: cfg.with_seg_map,
        folds,
        skipped,
        summary,
    })
}

/// Runs [`run_cv`] without and with the segmentation map on identical folds
/// and seeds.
pub fn ablation(data: &ClfDataset, split: &SplitSpec, cfg: &ClfConfig) -> Result<[CvResult; 2]> {
    let arm = |with_seg_map| {
        run_cv(
            data,
            split,
            &ClfConfig {
                with_seg_map,
                ..cfg.clone()
            },
        )
    };
    Ok([arm(false)?, arm(true)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub label: String,
    pub accuracy: f64,
}

/// Accuracy of always answering eczema and of always answering MF.
pub fn baselines(n_eczema: usize, n_mf: usize) -> [Baseline; 2] {
    let n = (n_eczema + n_mf).max(1) as f64;
    [
        Baseline {
            label: "Baseline Eczema".into(),
            accuracy: n_eczema as f64 / n,
        },
        Baseline {
            label: "Baseline MF".into(),
            accuracy: n_mf as f64 / n,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfReport {
    pub split: SplitSpec,
    pub baselines: Vec<Baseline>,
    pub rows: Vec<CvResult>,
}

/// Builds folds from the manifest and runs the with/without-map ablation for
/// each requested loss.
pub fn evaluate(manifest: &Manifest, data: &ClfDataset, cfg: &ClfConfig, losses: &[ClfLoss]) -> Result<ClfReport> {
    cfg.validate()?;
    let (n_e, n_mf) = (manifest.count(Disease::Eczema), manifest.count(Disease::Mf));
    if n_e == 0 || n_mf == 0 {
        return Err(Error::Split("classification needs both MF and eczema slides".into()));
    }
    let split = make_folds(manifest, cfg.folds, cfg.seed)?;
    let mut rows = Vec::new();
    for &l in losses {
        rows.extend(ablation(data, &split, &ClfConfig { loss: l, ..cfg.clone() })?);
    }
    Ok(ClfReport {
        split,
        baselines: baselines(n_e, n_mf).to_vec(),
        rows,
    })
}

impl ClfReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub const TABLE_HEADER: &'static str = "| Model | Accuracy | Precision/PPV | Recall/Sensitivity | F1 Score |";

    /// Markdown table: the eczema baseline, BCE rows, the MF baseline, cosine
    /// rows.
    pub fn table(&self) -> String {
        let mut out = format!("{}\n|---|---|---|---|---|\n", Self::TABLE_HEADER);
        let baseline = |out: &mut String, b: &Baseline| {
            let _ = writeln!(out, "| {} | {} | - | - | - |", b.label, percent(b.accuracy));
        };
        let rows = |out: &mut String, l: ClfLoss| {
            for r in self.rows.iter().filter(|r| r.loss == l) {
                let _ = write!(out, "| {} ", r.label());
                for s in &r.summary {
                    let _ = write!(out, "| {} ", s.render());
                }
                out.push_str("|\n");
            }
        };
        if let Some(b) = self.baselines.first() {
            baseline(&mut out, b);
        }
        rows(&mut out, ClfLoss::Bce);
        if let Some(b) = self.baselines.get(1) {
            baseline(&mut out, b);
        }
        rows(&mut out, ClfLoss::Cosine);
        let skipped: usize = self.rows.iter().map(|r| r.skipped.len()).sum();
        if skipped > 0 {
            let _ = writeln!(out, "\n{skipped} fold(s) skipped for lacking a diagnosis.");
        }
        out
    }
}
