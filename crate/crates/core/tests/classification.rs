use dermaseg::classify::{ablation, ClfConfig, ClfDataset};
use dermaseg::data::{make_folds, Disease};
use dermaseg::seg::{SegModel, SegModelConfig};
use dermaseg::synth::{generate_dataset, GenConfig, Span};
use dermaseg::tiling::TileConfig;

fn tiny_setup(dir: &std::path::Path) -> (dermaseg::data::Manifest, SegModel, ClfConfig, TileConfig) {
    let gen = GenConfig {
        slide_size: (256, 256),
        n_patients: 10,
        slides_per_patient: Span::new(1, 1),
        seed: 4,
        ..GenConfig::default()
    };
    let manifest = generate_dataset(&gen, dir).unwrap();
    let seg = SegModel::build(&SegModelConfig {
        base_width: 2,
        depth_stages: 3,
        input_size: 64,
        ..SegModelConfig::unet_desk()
    })
    .unwrap();
    let cfg = ClfConfig {
        input_size: 32,
        conv_channels: [2, 2, 4, 4],
        fc_hidden: 8,
        folds: 2,
        epochs: 2,
        ..ClfConfig::default()
    };
    let tiles = TileConfig {
        tile_size: 64,
        ..TileConfig::default()
    };
    (manifest, seg, cfg, tiles)
}

#[test]
fn inputs_do_not_depend_on_ground_truth_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, seg, cfg, tiles) = tiny_setup(tmp.path());
    let with_masks = ClfDataset::prepare(&manifest, Some(&seg), &cfg, &tiles).unwrap();
    std::fs::remove_dir_all(tmp.path().join("masks")).unwrap();
    let without_masks = ClfDataset::prepare(&manifest, Some(&seg), &cfg, &tiles).unwrap();
    assert_eq!(with_masks.inputs, without_masks.inputs);
    assert_eq!(with_masks.labels, without_masks.labels);
}

#[test]
fn both_arms_see_the_same_folds() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, seg, cfg, tiles) = tiny_setup(tmp.path());
    let data = ClfDataset::prepare(&manifest, Some(&seg), &cfg, &tiles).unwrap();
    assert!(manifest.count(Disease::Mf) > 0 && manifest.count(Disease::Eczema) > 0);
    let folds = make_folds(&manifest, cfg.folds, cfg.seed).unwrap();
    let [without, with] = ablation(&data, &folds, &cfg).unwrap();
    assert!(!without.with_seg_map && with.with_seg_map);
    let tests = |r: &dermaseg::classify::CvResult| r.folds.iter().map(|f| f.test_slides.clone()).collect::<Vec<_>>();
    assert_eq!(tests(&without), tests(&with));
    let skipped = |r: &dermaseg::classify::CvResult| r.skipped.iter().map(|s| s.fold).collect::<Vec<_>>();
    assert_eq!(skipped(&without), skipped(&with));
    // same fold partition, same seed, so a rerun gives the same numbers
    let [again, _] = ablation(&data, &folds, &cfg).unwrap();
    assert_eq!(again, without);
}
