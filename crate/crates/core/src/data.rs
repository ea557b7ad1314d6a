//! Domain types shared by the pipeline: slide records, class masks, dataset
//! manifests and patient-grouped splits.
//!
//! # Manifest format
//!
//! A manifest is a JSON Lines file. The first line is a header object, every
//! following non-empty line is one slide record:
//!
//! ```text
//! {"schema_version":1,"seed":7,"legend":[{"id":0,"name":"rest","color":[255,255,255]},...]}
//! {"slide_id":"s0000","patient_id":"p000","disease":"MF","image_path":"slides/s0000.png","mask_path":"masks/s0000.png","width":1024,"height":1024}
//! ```
//!
//! `disease` is `MF` or `E`; `mask_path` may be the empty string. Relative
//! paths are resolved against the directory holding the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::raster;

pub const SCHEMA_VERSION: u32 = 1;

pub const REST: u8 = 0;
pub const EPIDERMIS: u8 = 1;
pub const SPONGIOSIS: u8 = 2;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Disease {
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "E")]
    Eczema,
}

impl Disease {
    pub fn as_str(self) -> &'static str {
        match self {
            Disease::Mf => "MF",
            Disease::Eczema => "E",
        }
    }
}

impl FromStr for Disease {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "MF" => Ok(Disease::Mf),
            "E" => Ok(Disease::Eczema),
            other => Err(format!("expected `MF` or `E`, found `{other}`")),
        }
    }
}

/// Per-pixel class grid, row-major, ids in `{0 = rest, 1 = epidermis, 2 = spongiosis}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ClassMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::with_classes(width, height, data, NUM_CLASSES)
    }

    /// Validates against an arbitrary class count (binary masks use 2).
    pub fn with_classes(width: usize, height: usize, data: Vec<u8>, n_classes: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask buffer has {} cells, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(&id) = data.iter().find(|&&v| v as usize >= n_classes) {
            return Err(Error::ClassOutOfRange { id, n_classes });
        }
        Ok(ClassMask { width, height, data })
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        ClassMask { width, height, data }
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        ClassMask {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    /// Window at `(x, y)`; the window must lie inside the mask.
    pub fn window(&self, x: usize, y: usize, w: usize, h: usize) -> ClassMask {
        assert!(x + w <= self.width && y + h <= self.height, "window out of bounds");
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            data.extend_from_slice(&self.data[row * self.width + x..row * self.width + x + w]);
        }
        ClassMask::from_raw_unchecked(w, h, data)
    }

    /// Pixel count per class id `0..n_classes`.
    pub fn histogram(&self, n_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; n_classes.max(1)];
        for &v in &self.data {
            if (v as usize) < h.len() {
                h[v as usize] += 1;
            }
        }
        h
    }

    /// Relabels every class id through `map` (e.g. merge spongiosis into epidermis).
    pub fn map_classes(&self, map: impl Fn(u8) -> u8) -> ClassMask {
        ClassMask::from_raw_unchecked(self.width, self.height, self.data.iter().map(|&v| map(v)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub disease: Disease,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

pub fn default_legend() -> Vec<LegendEntry> {
    vec![
        LegendEntry {
            id: REST,
            name: "rest".into(),
            color: [255, 255, 255],
        },
        LegendEntry {
            id: EPIDERMIS,
            name: "epidermis".into(),
            color: [220, 40, 40],
        },
        LegendEntry {
            id: SPONGIOSIS,
            name: "spongiosis".into(),
            color: [40, 80, 220],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub legend: Vec<LegendEntry>,
}

#[derive(Serialize)]
struct RecordLine<'a> {
    slide_id: &'a str,
    patient_id: &'a str,
    disease: Disease,
    image_path: String,
    mask_path: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub slides: Vec<SlideRecord>,
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(seed: u64, slides: Vec<SlideRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Manifest {
            header: ManifestHeader {
                schema_version: SCHEMA_VERSION,
                seed,
                legend: default_legend(),
            },
            slides,
            root: root.into(),
        };
        m.check_records()?;
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn image_path(&self, rec: &SlideRecord) -> PathBuf {
        self.resolve(&rec.image_path)
    }

    pub fn mask_path(&self, rec: &SlideRecord) -> Option<PathBuf> {
        rec.mask_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn get(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.slides.iter().map(|s| s.patient_id.as_str()).collect()
    }

    pub fn count(&self, disease: Disease) -> usize {
        self.slides.iter().filter(|s| s.disease == disease).count()
    }

    /// Sub-manifest holding the given slides, in manifest order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Manifest {
        let keep: BTreeSet<&str> = ids.into_iter().collect();
        Manifest {
            header: self.header.clone(),
            slides: self
                .slides
                .iter()
                .filter(|s| keep.contains(s.slide_id.as_str()))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }

    fn check_records(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.slides {
            if !seen.insert(s.slide_id.as_str()) {
                return Err(Error::DuplicateSlide(s.slide_id.clone()));
            }
            if s.patient_id.is_empty() {
                return Err(Error::Shape(format!("slide `{}` has an empty patient_id", s.slide_id)));
            }
            if s.width == 0 || s.height == 0 {
                return Err(Error::Shape(format!("slide `{}` has zero extent", s.slide_id)));
            }
        }
        Ok(())
    }

    /// Checks every record against its on-disk rasters.
    pub fn check_rasters(&self) -> Result<()> {
        for s in &self.slides {
            let dims = raster::dimensions(&self.image_path(s))?;
            if dims != (s.width, s.height) {
                return Err(Error::DimensionMismatch {
                    what: format!("image of `{}`", s.slide_id),
                    expected: (s.width, s.height),
                    found: dims,
                });
            }
            if let Some(mp) = self.mask_path(s) {
                let md = raster::dimensions(&mp)?;
                if md != dims {
                    return Err(Error::DimensionMismatch {
                        what: format!("mask of `{}`", s.slide_id),
                        expected: dims,
                        found: md,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for s in &self.slides {
            let line = RecordLine {
                slide_id: &s.slide_id,
                patient_id: &s.patient_id,
                disease: s.disease,
                image_path: path_to_string(&s.image_path),
                mask_path: s.mask_path.as_deref().map(path_to_string).unwrap_or_default(),
                width: s.width,
                height: s.height,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses manifest text without touching the referenced rasters.
    pub fn parse(text: &str, origin: &Path, root: impl Into<PathBuf>) -> Result<Self> {
        let schema = |line: usize, field: &str, message: String| Error::Schema {
            path: origin.to_path_buf(),
            line,
            field: field.to_string(),
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header_text) = lines
            .next()
            .ok_or_else(|| schema(1, "header", "empty manifest".into()))?;
        let header: Value = serde_json::from_str(header_text).map_err(|e| schema(hl + 1, "header", e.to_string()))?;
        let version = header
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| schema(hl + 1, "schema_version", "missing or not an integer".into()))?;
        if version != SCHEMA_VERSION as u64 {
            return Err(schema(
                hl + 1,
                "schema_version",
                format!("unsupported version {version}"),
            ));
        }
        let seed = header
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| schema(hl + 1, "seed", "missing or not an integer".into()))?;
        let legend: Vec<LegendEntry> = header
            .get("legend")
            .cloned()
            .ok_or_else(|| schema(hl + 1, "legend", "missing".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| schema(hl + 1, "legend", e.to_string())))?;

        let mut slides = Vec::new();
        for (i, text) in lines {
            let ln = i + 1;
            let v: Value = serde_json::from_str(text).map_err(|e| schema(ln, "record", e.to_string()))?;
            let s = |f: &str| -> Result<String> {
                v.get(f)
                    .and_then(Value::as_str)
                    .map(str::to_owned)
                    .ok_or_else(|| schema(ln, f, "missing or not a string".into()))
            };
            let u = |f: &str| -> Result<usize> {
                match v.get(f).and_then(Value::as_u64) {
                    Some(n) if n > 0 => Ok(n as usize),
                    _ => Err(schema(ln, f, "missing or not a positive integer".into())),
                }
            };
            let slide_id = s("slide_id")?;
            if slide_id.is_empty() {
                return Err(schema(ln, "slide_id", "must not be empty".into()));
            }
            let patient_id = s("patient_id")?;
            if patient_id.is_empty() {
                return Err(schema(ln, "patient_id", "must not be empty".into()));
            }
            let disease: Disease = s("disease")?.parse().map_err(|e| schema(ln, "disease", e))?;
            let image_path = s("image_path")?;
            if image_path.is_empty() {
                return Err(schema(ln, "image_path", "must not be empty".into()));
            }
            let mask_path = s("mask_path")?;
            slides.push(SlideRecord {
                slide_id,
                patient_id,
                disease,
                image_path: PathBuf::from(image_path),
                mask_path: (!mask_path.is_empty()).then(|| PathBuf::from(mask_path)),
                width: u("width")?,
                height: u("height")?,
            });
        }
        let m = Manifest {
            header: ManifestHeader {
                schema_version: SCHEMA_VERSION,
                seed,
                legend,
            },
            slides,
            root: root.into(),
        };
        m.check_records()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

fn path_to_string(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Reads and fully validates a manifest, including raster dimensions on disk.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::parse(&text, path, root)?;
    m.check_rasters()?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SplitCell {
    Train,
    Val,
    Test,
    Fold(usize),
}

impl fmt::Display for SplitCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitCell::Train => f.write_str("train"),
            SplitCell::Val => f.write_str("val"),
            SplitCell::Test => f.write_str("test"),
            SplitCell::Fold(k) => write!(f, "fold-{k}"),
        }
    }
}

impl From<SplitCell> for String {
    fn from(c: SplitCell) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for SplitCell {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "train" => Ok(SplitCell::Train),
            "val" => Ok(SplitCell::Val),
            "test" => Ok(SplitCell::Test),
            other => other
                .strip_prefix("fold-")
                .and_then(|k| k.parse().ok())
                .map(SplitCell::Fold)
                .ok_or_else(|| format!("unknown split cell `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    /// Number of folds for cross-validation splits, `None` for train/val/test.
    pub folds: Option<usize>,
    pub assignment: BTreeMap<String, SplitCell>,
}

impl SplitSpec {
    pub fn slides_in(&self, cell: SplitCell) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &c)| c == cell)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn cell_of(&self, slide_id: &str) -> Option<SplitCell> {
        self.assignment.get(slide_id).copied()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("split serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            field: "split".into(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

struct PatientGroup<'a> {
    slides: Vec<&'a SlideRecord>,
    disease: Disease,
}

fn patient_groups(manifest: &Manifest) -> Vec<PatientGroup<'_>> {
    let mut by_patient: BTreeMap<&str, Vec<&SlideRecord>> = BTreeMap::new();
    for s in &manifest.slides {
        by_patient.entry(&s.patient_id).or_default().push(s);
    }
    by_patient
        .into_values()
        .map(|slides| {
            let mf = slides.iter().filter(|s| s.disease == Disease::Mf).count();
            let disease = if 2 * mf >= slides.len() {
                Disease::Mf
            } else {
                Disease::Eczema
            };
            PatientGroup { slides, disease }
        })
        .collect()
}

/// Greedy patient-grouped assignment into cells with the given weights.
///
/// Patients are shuffled by `seed`, then stably ordered by (class, slide count
/// descending). Each patient goes to the cell with the largest remaining
/// slide quota for its class; ties go to the cell with fewer slides, then the
/// lower index. Zero-weight cells never receive patients.
#[allow(clippy::type_complexity)]
fn grouped_assign<'m>(
    manifest: &'m Manifest,
    weights: &[f64],
    seed: u64,
) -> Result<Vec<(Vec<&'m SlideRecord>, usize)>> {
    let mut groups = patient_groups(manifest);
    let wanted = weights.iter().filter(|&&w| w > 0.0).count();
    if groups.len() < wanted {
        return Err(Error::Split(format!(
            "{} patient(s) cannot fill {wanted} non-empty splits",
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    groups.sort_by(|a, b| a.disease.cmp(&b.disease).then(b.slides.len().cmp(&a.slides.len())));

    let class_total = |d: Disease| manifest.count(d) as f64;
    let idx = |d: Disease| if d == Disease::Mf { 0 } else { 1 };
    let mut remaining: Vec<[f64; 2]> = weights
        .iter()
        .map(|&w| [w * class_total(Disease::Mf), w * class_total(Disease::Eczema)])
        .collect();
    let mut load = vec![0usize; weights.len()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); weights.len()];

    for (gi, g) in groups.iter().enumerate() {
        let c = idx(g.disease);
        let best = (0..weights.len())
            .filter(|&s| weights[s] > 0.0)
            .max_by(|&a, &b| {
                let (ra, rb) = (remaining[a][c], remaining[b][c]);
                if (ra - rb).abs() > 1e-9 {
                    ra.partial_cmp(&rb).unwrap()
                } else {
                    // fewer slides wins, then lower index
                    load[b].cmp(&load[a]).then(b.cmp(&a))
                }
            })
            .expect("at least one weighted split");
        remaining[best][c] -= g.slides.len() as f64;
        load[best] += g.slides.len();
        members[best].push(gi);
    }

    // Every weighted cell must hold at least one patient.
    while let Some(empty) = (0..weights.len()).find(|&s| weights[s] > 0.0 && members[s].is_empty()) {
        let donor = (0..weights.len())
            .filter(|&s| members[s].len() > 1)
            .max_by_key(|&s| (members[s].len(), std::cmp::Reverse(s)))
            .ok_or_else(|| Error::Split("cannot populate every split".into()))?;
        let (pos, _) = members[donor]
            .iter()
            .enumerate()
            .min_by_key(|(_, &gi)| groups[gi].slides.len())
            .expect("donor not empty");
        let gi = members[donor].remove(pos);
        members[empty].push(gi);
    }

    let mut out = Vec::with_capacity(groups.len());
    for (cell, gis) in members.into_iter().enumerate() {
        for gi in gis {
            out.push((groups[gi].slides.clone(), cell));
        }
    }
    Ok(out)
}

/// Patient-grouped train/val/test split preserving the MF:E slide ratio.
pub fn make_split(manifest: &Manifest, fractions: SplitFractions, seed: u64) -> Result<SplitSpec> {
    let w = [fractions.train, fractions.val, fractions.test];
    if w.iter().any(|&f| !(0.0..=1.0).contains(&f) || f.is_nan()) {
        return Err(Error::config("fractions", "each fraction must lie in [0, 1]"));
    }
    if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("fractions", "must sum to 1 within 1e-9"));
    }
    let cells = [SplitCell::Train, SplitCell::Val, SplitCell::Test];
    let assignment = grouped_assign(manifest, &w, seed)?
        .into_iter()
        .flat_map(|(slides, cell)| slides.into_iter().map(move |s| (s.slide_id.clone(), cells[cell])))
        .collect();
    Ok(SplitSpec {
        seed,
        folds: None,
        assignment,
    })
}

/// `k` patient-grouped cross-validation folds preserving the MF:E slide ratio.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<SplitSpec> {
    if k < 2 {
        return Err(Error::config("k", "must be at least 2"));
    }
    let patients = manifest.patients().len();
    if k > patients {
        return Err(Error::Split(format!(
            "{k} folds requested but only {patients} patient(s)"
        )));
    }
    let w = vec![1.0 / k as f64; k];
    let assignment = grouped_assign(manifest, &w, seed)?
        .into_iter()
        .flat_map(|(slides, fold)| {
            slides
                .into_iter()
                .map(move |s| (s.slide_id.clone(), SplitCell::Fold(fold)))
        })
        .collect();
    Ok(SplitSpec {
        seed,
        folds: Some(k),
        assignment,
    })
}
