//! MF-versus-eczema classification with and without the segmentation map,
//! cross-validated over patients.
//! Takes a few minutes on one core.
//!
//! A small EU-Net is trained first so the classifier has real probability
//! maps to consume.
//!
//! ```text
//! cargo run --release --example classifier_ablation -- [patients]
//! ```

use dermaseg::classify::{evaluate, ClfConfig, ClfDataset, ClfLoss};
use dermaseg::data::Disease;
use dermaseg::sampler::{extract_patches, SamplerConfig, SlideData};
use dermaseg::seg::{SegModel, SegModelConfig};
use dermaseg::synth::{generate_dataset, generate_slide, GenConfig, Span};
use dermaseg::tiling::TileConfig;
use dermaseg::train::{train_segmentation, PatchSet, TrainConfig, TrainOutput};

fn main() -> dermaseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let patients = std::env::args()
        .nth(1)
        .map_or(24, |p| p.parse().expect("patients must be a number"));
    let gen = GenConfig {
        seed: 11,
        n_patients: patients,
        slides_per_patient: Span::new(1, 2),
        ..GenConfig::default()
    };

    // segmentation model from a handful of slides outside the classification set
    let sampler = SamplerConfig {
        patch_size: 128,
        min_corner_distance: 50.0,
        quota_per_type: 4,
        ..SamplerConfig::default()
    };
    let seg_gen = GenConfig {
        seed: 1000,
        ..gen.clone()
    };
    let mut patches = PatchSet::new(128);
    for i in 0..6 {
        let disease = if i % 2 == 0 { Disease::Mf } else { Disease::Eczema };
        let (image, mask) = generate_slide(&seg_gen, i, disease);
        let slide = SlideData::new(format!("seg{i}"), image, mask)?;
        for p in extract_patches(&slide, &sampler, i as u64)? {
            let img = image::imageops::crop_imm(&slide.image, p.x as u32, p.y as u32, 128, 128).to_image();
            patches.push(&img, &slide.mask.window(p.x, p.y, 128, 128))?;
        }
    }
    let mut seg = SegModel::build(&SegModelConfig {
        base_width: 8,
        width_mult: 0.25,
        depth_mult: 0.25,
        input_size: 128,
        ..SegModelConfig::eunet_desk()
    })?;
    let tc = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    train_segmentation(&mut seg, &patches, &PatchSet::new(128), &tc, &TrainOutput::default())?;

    let dir = std::env::temp_dir().join("dermaseg-classifier");
    let manifest = generate_dataset(&gen, &dir)?;
    let cfg = ClfConfig {
        input_size: 128,
        ..ClfConfig::default()
    };
    let tiles = TileConfig {
        tile_size: 128,
        ..TileConfig::default()
    };
    let data = ClfDataset::prepare(&manifest, Some(&seg), &cfg, &tiles)?;
    let report = evaluate(&manifest, &data, &cfg, &[ClfLoss::Bce])?;
    println!("{}", report.table());
    Ok(())
}
