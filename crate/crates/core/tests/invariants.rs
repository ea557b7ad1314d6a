use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dermaseg::data::{make_folds, make_split, ClassMask, Disease, Manifest, SlideRecord, SplitFractions};
use dermaseg::metrics::{self, ConfusionCounts};
use dermaseg::nn::Tensor;
use dermaseg::raster;
use dermaseg::sampler::{classify_patch, extract_patches, SamplerConfig, SlideData};
use dermaseg::seg::{SegModel, SegModelConfig};
use dermaseg::synth::{generate_slide, GenConfig};
use dermaseg::tiling::{aligned_size, split_tiles, stitch_tiles, ResizePolicy, TileConfig};
use dermaseg::train::{lr_at, TrainConfig};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn manifest_from(patients: &[(bool, usize)]) -> Manifest {
    let mut slides = Vec::new();
    for (p, &(mf, n)) in patients.iter().enumerate() {
        for s in 0..n {
            slides.push(SlideRecord {
                slide_id: format!("p{p:03}-s{s}"),
                patient_id: format!("p{p:03}"),
                disease: if mf { Disease::Mf } else { Disease::Eczema },
                image_path: format!("slides/p{p:03}-s{s}.png").into(),
                mask_path: Some(format!("masks/p{p:03}-s{s}.png").into()),
                width: 1024,
                height: 768,
            });
        }
    }
    Manifest::new(1, slides, ".").unwrap()
}

fn patients() -> impl Strategy<Value = Vec<(bool, usize)>> {
    prop::collection::vec((any::<bool>(), 1usize..4), 6..40).prop_filter("both diseases", |ps| {
        ps.iter().filter(|p| p.0).count() >= 3 && ps.iter().filter(|p| !p.0).count() >= 3
    })
}

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = ClassMask> {
    prop::collection::vec(0u8..3, w * h).prop_map(move |d| ClassMask::new(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_keep_patients_whole_and_are_pure(ps in patients(), seed in any::<u64>()) {
        let m = manifest_from(&ps);
        let split = make_split(&m, SplitFractions::default(), seed).unwrap();
        let folds = make_folds(&m, 5, seed).unwrap();
        for spec in [&split, &folds] {
            let mut cell_of_patient = BTreeMap::new();
            for rec in &m.slides {
                let cell = spec.cell_of(&rec.slide_id).unwrap();
                prop_assert_eq!(*cell_of_patient.entry(rec.patient_id.clone()).or_insert(cell), cell);
            }
        }
        prop_assert_eq!(&split, &make_split(&m, SplitFractions::default(), seed).unwrap());
        prop_assert_eq!(&folds, &make_folds(&m, 5, seed).unwrap());
    }

    #[test]
    fn manifest_text_round_trip(ps in patients()) {
        let m = manifest_from(&ps);
        let text = m.to_jsonl();
        let back = Manifest::parse(&text, Path::new("manifest.jsonl"), ".").unwrap();
        prop_assert_eq!(back.to_jsonl(), text);
        prop_assert_eq!(back.slides, m.slides);
    }

    #[test]
    fn patch_type_ignores_pixel_order(mask in mask_strategy(8, 8), white in prop::collection::vec(any::<bool>(), 64), shift in 1usize..64) {
        let mut img = RgbImage::from_pixel(8, 8, Rgb([200, 150, 190]));
        for (i, &w) in white.iter().enumerate() {
            if w {
                img.put_pixel((i % 8) as u32, (i / 8) as u32, Rgb([255, 255, 255]));
            }
        }
        let cfg = SamplerConfig { patch_size: 8, ..SamplerConfig::default() };
        let t = classify_patch(&img, &mask, &cfg).unwrap();
        // rotate the pixel order of image and mask together
        let rot = |i: usize| (i + shift) % 64;
        let mut img2 = img.clone();
        let mut d2 = vec![0u8; 64];
        for i in 0..64 {
            let j = rot(i);
            img2.put_pixel((j % 8) as u32, (j / 8) as u32, *img.get_pixel((i % 8) as u32, (i / 8) as u32));
            d2[j] = mask.as_slice()[i];
        }
        let t2 = classify_patch(&img2, &ClassMask::new(8, 8, d2).unwrap(), &cfg).unwrap();
        prop_assert_eq!(t, t2);
    }

    #[test]
    fn tiles_round_trip_and_alignment_is_stable(tx in 1usize..5, ty in 1usize..5, c in 1usize..4, w in 1usize..50_000, h in 1usize..50_000, ceil in any::<bool>()) {
        let tile = 32;
        let t = Tensor::from_vec(&[ty * tile, tx * tile, c], (0..ty * tx * tile * tile * c).map(|v| v as f32).collect()).unwrap();
        let tiles = split_tiles(&t, tile).unwrap();
        // the tiles hold every element exactly once
        let total: usize = tiles.iter().map(|t| t.data().len()).sum();
        prop_assert_eq!(total, t.data().len());
        prop_assert_eq!(stitch_tiles(&tiles, tx * tile, ty * tile, tile).unwrap(), t);

        let cfg = TileConfig {
            tile_size: 4096,
            resize_policy: if ceil { ResizePolicy::CeilMultiple } else { ResizePolicy::NearestMultiple },
            ..TileConfig::default()
        };
        let a = aligned_size(w, h, &cfg);
        prop_assert_eq!(aligned_size(a.0, a.1, &cfg), a);
    }

    #[test]
    fn mask_resize_never_invents_classes(mask in mask_strategy(9, 7), w in 1usize..30, h in 1usize..30) {
        let seen: BTreeSet<u8> = mask.as_slice().iter().copied().collect();
        let r = raster::resize_mask(&mask, w, h);
        prop_assert_eq!(r.dims(), (w, h));
        prop_assert!(r.as_slice().iter().all(|c| seen.contains(c)));
    }

    #[test]
    fn counts_follow_class_relabelling(pred in mask_strategy(6, 6), gt in mask_strategy(6, 6), perm in Just([0u8, 1, 2]).prop_shuffle()) {
        let c = metrics::count(&pred, &gt, 3).unwrap();
        let relabel = |m: &ClassMask| m.map_classes(|k| perm[k as usize]);
        let c2 = metrics::count(&relabel(&pred), &relabel(&gt), 3).unwrap();
        for (k, &to) in perm.iter().enumerate() {
            prop_assert_eq!(c.per_class[k], c2.per_class[to as usize]);
        }
        prop_assert_eq!(c.metrics(), c2.metrics());
    }

    #[test]
    fn metrics_stay_in_range(pred in mask_strategy(5, 5), gt in mask_strategy(5, 5)) {
        let m = metrics::count(&pred, &gt, 3).unwrap().metrics();
        for v in [m.precision, m.recall, m.f1, m.mean_iou, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((-1.0..=1.0).contains(&m.mcc));
    }

    #[test]
    fn tiled_counts_add_up_to_whole_slide_counts(pred in mask_strategy(12, 8), gt in mask_strategy(12, 8), tile in 1usize..6) {
        let whole = metrics::count(&pred, &gt, 3).unwrap();
        let mut sum = ConfusionCounts::zeros(3);
        let (w, h) = gt.dims();
        for y in (0..h).step_by(tile) {
            for x in (0..w).step_by(tile) {
                let (tw, th) = (tile.min(w - x), tile.min(h - y));
                sum += metrics::count(&pred.window(x, y, tw, th), &gt.window(x, y, tw, th), 3).unwrap();
            }
        }
        prop_assert_eq!(sum.metrics(), whole.metrics());
        prop_assert_eq!(sum, whole);
    }

    #[test]
    fn schedule_is_piecewise_constant(a in 0u64..2_000_000, b in 0u64..2_000_000) {
        let cfg = TrainConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(hi, &cfg) <= lr_at(lo, &cfg));
        if lo / cfg.decay_steps == hi / cfg.decay_steps {
            prop_assert_eq!(lr_at(lo, &cfg), lr_at(hi, &cfg));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sampler_respects_distance_and_quota(seed in any::<u64>(), quota in 1usize..6, dist in 20.0f64..80.0) {
        let gen = GenConfig { slide_size: (384, 384), ..GenConfig::default() };
        let (image, mask) = generate_slide(&gen, (seed % 5) as usize, Disease::Eczema);
        let slide = SlideData::new("s", image, mask).unwrap();
        let cfg = SamplerConfig {
            patch_size: 64,
            min_corner_distance: dist,
            quota_per_type: quota,
            max_attempts_per_patch: 50,
            ..SamplerConfig::default()
        };
        let refs = extract_patches(&slide, &cfg, seed).unwrap();
        for (i, a) in refs.iter().enumerate() {
            for b in &refs[i + 1..] {
                prop_assert!((a.x as f64 - b.x as f64).hypot(a.y as f64 - b.y as f64) >= dist);
            }
        }
        let mut per_type = BTreeMap::new();
        refs.iter().for_each(|r| *per_type.entry(r.patch_type).or_insert(0) += 1);
        prop_assert!(per_type.values().all(|&n| n <= quota));
        prop_assert_eq!(refs, extract_patches(&slide, &cfg, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn models_keep_spatial_size_and_normalise(eunet in any::<bool>(), side in 1usize..4, seed in any::<u64>()) {
        let cfg = if eunet {
            SegModelConfig { base_width: 2, width_mult: 0.25, depth_mult: 0.25, input_size: 64, ..SegModelConfig::eunet_desk() }
        } else {
            SegModelConfig { base_width: 2, depth_stages: 3, input_size: 64, ..SegModelConfig::unet_desk() }
        };
        let model = SegModel::build(&cfg).unwrap();
        let bigger = SegModel::build(&SegModelConfig { input_size: 128, ..cfg.clone() }).unwrap();
        prop_assert_eq!(model.parameter_count(), bigger.parameter_count());

        let n = side * 32;
        let mut rng = seed;
        let data: Vec<f32> = (0..n * n * 3)
            .map(|_| {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (rng >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
            })
            .collect();
        let x = Tensor::from_vec(&[1, n, n, 3], data).unwrap();
        let y = model.forward_any_size(&x).unwrap();
        prop_assert_eq!(y.shape(), &[1, n, n, 3]);
        for px in y.data().chunks(3) {
            prop_assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
