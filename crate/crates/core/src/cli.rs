//! The `dermaseg` command: one subcommand per pipeline stage, all driven by a
//! single TOML run configuration.
//!
//! Everything a run produces lives under `<out>/<run-id>/`, except the
//! generated dataset, which goes to the data directory (by default
//! `<out>/<run-id>/data`). Each stage writes the effective configuration as
//! `config.toml` next to its outputs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing prerequisite
//! artifact, 4 runtime failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{self, ClfConfig, ClfDataset, ClfLoss, ClfReport};
use crate::data::{load_manifest, make_split, Manifest, SplitCell, SplitFractions, SplitSpec, EPIDERMIS, SPONGIOSIS};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, SlideResult};
use crate::raster;
use crate::sampler::{self, SamplerConfig, SlideData};
use crate::seg::{Arch, SegModel, SegModelConfig};
use crate::synth::{generate_dataset, GenConfig, Span};
use crate::tiling::{self, ResizePolicy, TileConfig};
use crate::train::{self, PatchSet, TrainConfig, TrainOutput};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const TABLES_FILE: &str = "tables.md";
pub const DATA_DIR_ENV: &str = "DERMASEG_DATA_DIR";

/// Every knob of a run. The top-level `seed` overrides the seeds of the
/// individual stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset location; `<out_dir>/<run_id>/data` when unset.
    pub data_dir: Option<PathBuf>,
    pub generate: GenConfig,
    pub split: SplitFractions,
    pub sampler: SamplerConfig,
    pub unet: SegModelConfig,
    pub eunet: SegModelConfig,
    pub train: TrainConfig,
    pub tiles: TileConfig,
    pub classifier: ClfConfig,
    /// Which segmentation model feeds the classifier.
    pub classifier_seg_arch: Arch,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::smoke()
    }
}

impl RunConfig {
    /// Small slides and tiny models; the whole pipeline runs in a few minutes
    /// on one CPU core.
    pub fn smoke() -> Self {
        RunConfig {
            run_id: "smoke".into(),
            seed: 0,
            out_dir: "runs".into(),
            data_dir: None,
            generate: GenConfig {
                slide_size: (512, 512),
                n_patients: 20,
                ..GenConfig::smoke()
            },
            split: SplitFractions::default(),
            sampler: SamplerConfig {
                patch_size: 128,
                min_corner_distance: 50.0,
                quota_per_type: 4,
                ..SamplerConfig::default()
            },
            unet: SegModelConfig {
                base_width: 4,
                depth_stages: 3,
                input_size: 128,
                ..SegModelConfig::unet_desk()
            },
            eunet: SegModelConfig {
                base_width: 4,
                width_mult: 0.25,
                depth_mult: 0.25,
                input_size: 128,
                ..SegModelConfig::eunet_desk()
            },
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            tiles: TileConfig {
                tile_size: 128,
                ..TileConfig::default()
            },
            classifier: ClfConfig {
                input_size: 64,
                conv_channels: [4, 8, 8, 16],
                epochs: 3,
                ..ClfConfig::default()
            },
            classifier_seg_arch: Arch::Eunet,
        }
    }

    /// Full-scale dimensions: 4096 px tiles and classifier input, a
    /// B7-sized EU-Net encoder, 512 px patches. Documents the shape of the
    /// original setup; far beyond what a desk machine trains in useful time.
    pub fn paper_shape() -> Self {
        RunConfig {
            run_id: "paper-shape".into(),
            seed: 0,
            out_dir: "runs".into(),
            data_dir: None,
            generate: GenConfig {
                slide_size: (8192, 8192),
                n_patients: 60,
                slides_per_patient: Span::new(1, 4),
                ..GenConfig::default()
            },
            split: SplitFractions::default(),
            sampler: SamplerConfig::default(),
            unet: SegModelConfig {
                base_width: 64,
                input_size: 512,
                ..SegModelConfig::unet_desk()
            },
            eunet: SegModelConfig {
                width_mult: 2.0,
                depth_mult: 3.1,
                input_size: 512,
                ..SegModelConfig::eunet_desk()
            },
            train: TrainConfig::default(),
            tiles: TileConfig {
                tile_size: 4096,
                resize_policy: ResizePolicy::NearestMultiple,
                eval_downscale: 2,
                batch_tiles: 1,
            },
            classifier: ClfConfig {
                input_size: 4096,
                ..ClfConfig::default()
            },
            classifier_seg_arch: Arch::Eunet,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Smoke => Self::smoke(),
            Preset::PaperShape => Self::paper_shape(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config file", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    /// Copies the top-level seed into every stage.
    pub fn propagate_seed(&mut self) {
        self.generate.seed = self.seed;
        self.train.seed = self.seed;
        self.classifier.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let safe = !self.run_id.is_empty()
            && !self.run_id.starts_with('.')
            && self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if !safe {
            return Err(Error::config(
                "run_id",
                "must be non-empty, not start with `.`, and use only [A-Za-z0-9._-]",
            ));
        }
        let f = self.split;
        if [f.train, f.val, f.test].iter().any(|v| !(*v >= 0.0 && v.is_finite())) || f.train <= 0.0 {
            return Err(Error::config(
                "split",
                "fractions must be finite, non-negative, with train > 0",
            ));
        }
        self.generate.validate()?;
        self.sampler.validate()?;
        for (name, m, arch) in [("unet", &self.unet, Arch::Unet), ("eunet", &self.eunet, Arch::Eunet)] {
            m.validate()?;
            if m.arch != arch {
                return Err(Error::config(format!("{name}.arch"), format!("must be `{arch}`")));
            }
        }
        self.train.validate()?;
        self.tiles.validate()?;
        self.classifier.validate()?;
        Ok(())
    }

    pub fn model(&self, arch: Arch) -> &SegModelConfig {
        match arch {
            Arch::Unet => &self.unet,
            Arch::Eunet => &self.eunet,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.run_dir().join("data"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Smoke,
    PaperShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossChoice {
    Bce,
    Cosine,
    Both,
}

impl LossChoice {
    fn losses(self) -> Vec<ClfLoss> {
        match self {
            LossChoice::Bce => vec![ClfLoss::Bce],
            LossChoice::Cosine => vec![ClfLoss::Cosine],
            LossChoice::Both => vec![ClfLoss::Bce, ClfLoss::Cosine],
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dermaseg",
    version,
    about = "Skin-tissue slide segmentation and MF/eczema classification"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration (flags override its values).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Root directory for run outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Refuse to overwrite existing outputs.
    #[arg(long, global = true)]
    pub no_clobber: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write synthetic slides, masks and the manifest.
    Generate,
    /// Patient-grouped train/val/test split.
    Split,
    /// Class-balanced training patches from the train slides.
    Extract,
    /// Train a segmentation model on the extracted patches.
    TrainSeg {
        #[arg(long, default_value = "eunet")]
        arch: Arch,
        /// Continue from the last checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tiled whole-slide prediction of the test slides.
    Predict {
        #[arg(long, default_value = "eunet")]
        arch: Arch,
    },
    /// Score stored predictions against the ground truth.
    Eval {
        #[arg(long, default_value = "eunet")]
        arch: Arch,
    },
    /// Cross-validated MF/eczema classification with and without the map.
    TrainClf {
        #[arg(long, value_enum, default_value = "both")]
        loss: LossChoice,
    },
    /// Assemble the result tables from stored reports.
    Report,
    /// Every stage in order, both architectures.
    Pipeline,
    /// Print the effective configuration.
    ShowConfig,
}

/// Resolves the effective configuration: file or preset, then flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(common.preset.unwrap_or(Preset::Smoke)),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = &common.run_id {
        cfg.run_id = r.clone();
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &common.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingPrerequisite { .. } => 3,
        _ => 4,
    }
}

/// Stage runner bound to one resolved configuration.
pub struct Runner {
    pub cfg: RunConfig,
    pub no_clobber: bool,
}

fn require(path: &Path, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            artifact: path.to_path_buf(),
            command: command.into(),
        })
    }
}

fn mkdir(d: &Path) -> Result<()> {
    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn arch_label(a: Arch) -> &'static str {
    match a {
        Arch::Unet => "U-Net",
        Arch::Eunet => "EU-Net",
    }
}

impl Runner {
    pub fn new(cfg: RunConfig, no_clobber: bool) -> Self {
        Runner { cfg, no_clobber }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.cfg.run_dir()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.cfg.data_dir().join(MANIFEST_FILE)
    }

    pub fn split_path(&self) -> PathBuf {
        self.run_dir().join("split").join(SPLIT_FILE)
    }

    pub fn patch_dir(&self) -> PathBuf {
        self.run_dir().join("patches")
    }

    pub fn seg_dir(&self, arch: Arch) -> PathBuf {
        self.run_dir().join(format!("seg-{arch}"))
    }

    pub fn pred_dir(&self, arch: Arch) -> PathBuf {
        self.run_dir().join(format!("pred-{arch}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.run_dir().join("reports")
    }

    /// Creates `dir`, refusing when `marker` exists under --no-clobber, and
    /// stores the config snapshot.
    fn prepare_output(&self, dir: &Path, marker: &Path) -> Result<()> {
        if self.no_clobber && marker.exists() {
            return Err(Error::config(
                "no_clobber",
                format!("refuses to overwrite {}", marker.display()),
            ));
        }
        mkdir(dir)?;
        write(&dir.join(CONFIG_SNAPSHOT), &self.cfg.to_toml())
    }

    fn manifest(&self) -> Result<Manifest> {
        let p = self.manifest_path();
        require(&p, "generate")?;
        load_manifest(&p)
    }

    fn split(&self) -> Result<SplitSpec> {
        let p = self.split_path();
        require(&p, "split")?;
        SplitSpec::load(&p)
    }

    fn load_model(&self, arch: Arch) -> Result<SegModel> {
        let p = self.seg_dir(arch).join(train::BEST_CHECKPOINT);
        require(&p, &format!("train-seg --arch {arch}"))?;
        Ok(SegModel::load(&p, Some(self.cfg.model(arch)))?.0)
    }

    pub fn generate(&self) -> Result<Manifest> {
        let dir = self.cfg.data_dir();
        self.prepare_output(&dir, &dir.join(MANIFEST_FILE))?;
        let m = generate_dataset(&self.cfg.generate, &dir)?;
        println!(
            "generated {} slides ({} MF, {} eczema) in {}",
            m.slides.len(),
            m.count(crate::data::Disease::Mf),
            m.count(crate::data::Disease::Eczema),
            dir.display()
        );
        Ok(m)
    }

    pub fn split_stage(&self) -> Result<SplitSpec> {
        let m = self.manifest()?;
        let path = self.split_path();
        self.prepare_output(path.parent().expect("split dir"), &path)?;
        let s = make_split(&m, self.cfg.split, self.cfg.seed)?;
        s.save(&path)?;
        println!(
            "split: {} train, {} val, {} test slides",
            s.slides_in(SplitCell::Train).len(),
            s.slides_in(SplitCell::Val).len(),
            s.slides_in(SplitCell::Test).len()
        );
        Ok(s)
    }

    pub fn extract(&self) -> Result<usize> {
        let m = self.manifest()?;
        let split = self.split()?;
        let dir = self.patch_dir();
        self.prepare_output(&dir, &dir.join(sampler::INDEX_FILE))?;
        let train_ids = split.slides_in(SplitCell::Train);
        let refs = train_ids
            .par_iter()
            .map(|id| {
                let rec = m
                    .get(id)
                    .ok_or_else(|| Error::Split(format!("split names unknown slide {id}")))?;
                let idx = m.slides.iter().position(|r| r.slide_id == *id).unwrap_or(0) as u64;
                let slide = SlideData::load(&m, rec)?;
                sampler::extract_patches(
                    &slide,
                    &self.cfg.sampler,
                    self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(idx),
                )
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        let rows = sampler::materialize_patches(&refs, &m, &dir)?;
        let mut per_type = [0usize; 4];
        rows.iter().for_each(|r| per_type[r.patch_type.index()] += 1);
        println!(
            "extracted {} patches from {} slides (background/spongiosis/epidermis/other: {:?})",
            rows.len(),
            train_ids.len(),
            per_type
        );
        Ok(rows.len())
    }

    pub fn train_seg(&self, arch: Arch, resume: bool, epochs: Option<usize>) -> Result<train::TrainOutcome> {
        let m = self.manifest()?;
        let split = self.split()?;
        let mcfg = self.cfg.model(arch).clone();
        let patches = PatchSet::load_index(&self.patch_dir(), mcfg.input_size, |_| true)?;
        let mut val_slides = Vec::new();
        for id in split.slides_in(SplitCell::Val) {
            let rec = m
                .get(id)
                .ok_or_else(|| Error::Split(format!("split names unknown slide {id}")))?;
            let s = SlideData::load(&m, rec)?;
            val_slides.push((s.image, s.mask));
        }
        let val = PatchSet::from_grid(&val_slides, mcfg.input_size)?;
        let dir = self.seg_dir(arch);
        if !resume {
            self.prepare_output(&dir, &dir.join(train::BEST_CHECKPOINT))?;
        }
        let tcfg = TrainConfig {
            epochs: epochs.unwrap_or(self.cfg.train.epochs),
            ..self.cfg.train.clone()
        };
        let mut model = SegModel::build(&mcfg)?;
        println!(
            "training {} ({} parameters) on {} patches, {} validation tiles",
            arch_label(arch),
            model.parameter_count(),
            patches.len(),
            val.len()
        );
        let out = train::train_segmentation(
            &mut model,
            &patches,
            &val,
            &tcfg,
            &TrainOutput {
                dir: Some(dir.clone()),
                resume,
            },
        )?;
        println!(
            "best epoch {} (val mean IoU {:.4}), checkpoints in {}",
            out.best_epoch,
            out.best_val_mean_iou,
            dir.display()
        );
        Ok(out)
    }

    pub fn predict(&self, arch: Arch) -> Result<usize> {
        let m = self.manifest()?;
        let split = self.split()?;
        let model = self.load_model(arch)?;
        let dir = self.pred_dir(arch);
        self.prepare_output(&dir, &dir.join(CONFIG_SNAPSHOT))?;
        let ids = split.slides_in(SplitCell::Test);
        for id in &ids {
            let rec = m
                .get(id)
                .ok_or_else(|| Error::Split(format!("split names unknown slide {id}")))?;
            let img = raster::read_rgb(&m.image_path(rec))?;
            let pred = tiling::predict_slide(&model, &img, &self.cfg.tiles)?;
            let mask = pred.mask_at(img.width() as usize, img.height() as usize);
            raster::write_mask(&dir.join(format!("{id}.png")), &mask)?;
        }
        println!("predicted {} test slides into {}", ids.len(), dir.display());
        Ok(ids.len())
    }

    /// Scores stored predictions: three classes, and epidermis (including
    /// spongiosis) against rest.
    pub fn eval(&self, arch: Arch) -> Result<[EvalReport; 2]> {
        let m = self.manifest()?;
        let split = self.split()?;
        let pred_dir = self.pred_dir(arch);
        require(&pred_dir, &format!("predict --arch {arch}"))?;
        let n_classes = self.cfg.model(arch).num_classes;
        let mut multi = Vec::new();
        let mut binary = Vec::new();
        for id in split.slides_in(SplitCell::Test) {
            let rec = m
                .get(id)
                .ok_or_else(|| Error::Split(format!("split names unknown slide {id}")))?;
            let gt_path = m
                .mask_path(rec)
                .ok_or_else(|| Error::Runtime(format!("slide {id} has no ground-truth mask")))?;
            let gt = raster::read_mask(&gt_path)?;
            let pp = pred_dir.join(format!("{id}.png"));
            require(&pp, &format!("predict --arch {arch}"))?;
            let pred = raster::read_mask(&pp)?;
            let (p, g) = tiling::eval_pair(&gt, &pred, &self.cfg.tiles)?;
            multi.push(SlideResult::new(id, metrics::count(&p, &g, n_classes)?));
            let fold = |c: u8| (c == EPIDERMIS || c == SPONGIOSIS) as u8;
            binary.push(SlideResult::new(
                id,
                metrics::count(&p.map_classes(fold), &g.map_classes(fold), 2)?,
            ));
        }
        let dir = self.report_dir();
        mkdir(&dir)?;
        let reports = [
            metrics::report(arch_label(arch), multi)?,
            metrics::report(arch_label(arch), binary)?,
        ];
        for (r, suffix) in reports.iter().zip(["", "-binary"]) {
            let stem = format!("seg-{arch}{suffix}");
            let json = dir.join(format!("{stem}.json"));
            if self.no_clobber && json.exists() {
                return Err(Error::config(
                    "no_clobber",
                    format!("refuses to overwrite {}", json.display()),
                ));
            }
            write(&json, &r.to_json())?;
            write(&dir.join(format!("{stem}.md")), &EvalReport::table(&[r]))?;
        }
        write(&dir.join(CONFIG_SNAPSHOT), &self.cfg.to_toml())?;
        println!("{}", EvalReport::table(&[&reports[0]]));
        Ok(reports)
    }

    pub fn train_clf(&self, losses: &[ClfLoss]) -> Result<ClfReport> {
        let m = self.manifest()?;
        let arch = self.cfg.classifier_seg_arch;
        let seg = self.load_model(arch)?;
        let dir = self.report_dir();
        self.prepare_output(&dir, &dir.join("clf.json"))?;
        let ccfg = ClfConfig {
            seg_classes: seg.config().num_classes,
            ..self.cfg.classifier.clone()
        };
        println!("preparing classifier inputs for {} slides", m.slides.len());
        let data = ClfDataset::prepare(&m, Some(&seg), &ccfg, &self.cfg.tiles)?;
        let report = classify::evaluate(&m, &data, &ccfg, losses)?;
        write(&dir.join("clf.json"), &report.to_json())?;
        write(&dir.join("clf.md"), &report.table())?;
        println!("{}", report.table());
        Ok(report)
    }

    /// Collects the stored reports into one Markdown file with the binary
    /// and three-class segmentation tables and the classification table.
    pub fn report(&self) -> Result<String> {
        let dir = self.report_dir();
        let load_seg = |name: String| -> Result<Option<EvalReport>> {
            let p = dir.join(name);
            if !p.exists() {
                return Ok(None);
            }
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| Error::Runtime(format!("{}: {e}", p.display())))
        };
        let mut binary = Vec::new();
        let mut multi = Vec::new();
        for arch in [Arch::Unet, Arch::Eunet] {
            binary.extend(load_seg(format!("seg-{arch}-binary.json"))?);
            multi.extend(load_seg(format!("seg-{arch}.json"))?);
        }
        let clf_path = dir.join("clf.json");
        let clf: Option<ClfReport> = if clf_path.exists() {
            let text = std::fs::read_to_string(&clf_path).map_err(|e| Error::io(&clf_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Runtime(format!("{}: {e}", clf_path.display())))?)
        } else {
            None
        };
        if multi.is_empty() && clf.is_none() {
            return Err(Error::MissingPrerequisite {
                artifact: dir.join("seg-<arch>.json"),
                command: "eval".into(),
            });
        }
        let mut out = format!("# Results for run `{}`\n\nAll values in percent, standard deviation over slides or folds in parentheses.\n", self.cfg.run_id);
        let section = |out: &mut String, title: &str, reports: &[EvalReport], missing: &str| {
            let _ = writeln!(out, "\n## {title}\n");
            if reports.is_empty() {
                let _ = writeln!(out, "_not available: run `{missing}`_");
            } else {
                out.push_str(&EvalReport::table(&reports.iter().collect::<Vec<_>>()));
            }
        };
        section(&mut out, "Segmentation, epidermis vs rest", &binary, "eval");
        section(&mut out, "Segmentation, rest / epidermis / spongiosis", &multi, "eval");
        let _ = writeln!(out, "\n## MF vs eczema classification (MF positive)\n");
        match &clf {
            Some(r) => out.push_str(&r.table()),
            None => out.push_str("_not available: run `train-clf`_\n"),
        }
        let path = dir.join(TABLES_FILE);
        if self.no_clobber && path.exists() {
            return Err(Error::config(
                "no_clobber",
                format!("refuses to overwrite {}", path.display()),
            ));
        }
        write(&path, &out)?;
        println!("{out}");
        Ok(out)
    }

    pub fn pipeline(&self) -> Result<()> {
        self.generate()?;
        self.split_stage()?;
        self.extract()?;
        for arch in [Arch::Unet, Arch::Eunet] {
            self.train_seg(arch, false, None)?;
            self.predict(arch)?;
            self.eval(arch)?;
        }
        self.train_clf(&LossChoice::Both.losses())?;
        self.report()?;
        Ok(())
    }
}

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.common.jobs {
        if j == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        // fails only if a pool already exists, in which case that one is used
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let cfg = resolve_config(&cli.common)?;
    let r = Runner::new(cfg, cli.common.no_clobber);
    match &cli.command {
        Command::Generate => r.generate().map(drop),
        Command::Split => r.split_stage().map(drop),
        Command::Extract => r.extract().map(drop),
        Command::TrainSeg { arch, resume, epochs } => r.train_seg(*arch, *resume, *epochs).map(drop),
        Command::Predict { arch } => r.predict(*arch).map(drop),
        Command::Eval { arch } => r.eval(*arch).map(drop),
        Command::TrainClf { loss } => r.train_clf(&loss.losses()).map(drop),
        Command::Report => r.report().map(drop),
        Command::Pipeline => r.pipeline(),
        Command::ShowConfig => {
            print!("{}", r.cfg.to_toml());
            Ok(())
        }
    }
}
