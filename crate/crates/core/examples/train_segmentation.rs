//! Trains a segmentation model on balanced patches from a few synthetic
//! slides and scores it on a held-out slide.
//!
//! ```text
//! cargo run --release --example train_segmentation -- [unet|eunet] [epochs]
//! ```

use dermaseg::data::Disease;
use dermaseg::metrics::{self, SlideResult};
use dermaseg::sampler::{extract_patches, SamplerConfig, SlideData};
use dermaseg::seg::{Arch, SegModel, SegModelConfig};
use dermaseg::synth::{generate_slide, GenConfig};
use dermaseg::tiling::{evaluate_slide, TileConfig};
use dermaseg::train::{train_segmentation, PatchSet, TrainConfig, TrainOutput};

fn main() -> dermaseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let arch: Arch = args.next().as_deref().unwrap_or("eunet").parse()?;
    let epochs = args.next().map_or(3, |e| e.parse().expect("epochs must be a number"));

    let gen = GenConfig {
        slide_size: (512, 512),
        ..GenConfig::default()
    };
    let sampler = SamplerConfig {
        patch_size: 128,
        min_corner_distance: 50.0,
        quota_per_type: 4,
        ..SamplerConfig::default()
    };
    let mut train = PatchSet::new(128);
    for i in 0..4 {
        let disease = if i % 2 == 0 { Disease::Mf } else { Disease::Eczema };
        let (image, mask) = generate_slide(&gen, i, disease);
        let slide = SlideData::new(format!("s{i}"), image, mask)?;
        for p in extract_patches(&slide, &sampler, i as u64)? {
            let img = image::imageops::crop_imm(&slide.image, p.x as u32, p.y as u32, 128, 128).to_image();
            train.push(&img, &slide.mask.window(p.x, p.y, 128, 128))?;
        }
    }

    let model_cfg = match arch {
        Arch::Unet => SegModelConfig {
            base_width: 8,
            depth_stages: 3,
            input_size: 128,
            ..SegModelConfig::unet_desk()
        },
        Arch::Eunet => SegModelConfig {
            base_width: 8,
            width_mult: 0.25,
            depth_mult: 0.25,
            input_size: 128,
            ..SegModelConfig::eunet_desk()
        },
    };
    let mut model = SegModel::build(&model_cfg)?;
    println!(
        "{arch}: {} parameters, {} training patches",
        model.parameter_count(),
        train.len()
    );
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    train_segmentation(&mut model, &train, &PatchSet::new(128), &cfg, &TrainOutput::default())?;

    let (image, mask) = generate_slide(&gen, 99, Disease::Mf);
    let tiles = TileConfig {
        tile_size: 128,
        ..TileConfig::default()
    };
    let counts = evaluate_slide(&model, &image, &mask, &tiles)?;
    let report = metrics::report(arch.to_string(), vec![SlideResult::new("held-out", counts)])?;
    println!("{}", metrics::EvalReport::table(&[&report]));
    Ok(())
}
