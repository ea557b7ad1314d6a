//! Tile-aligned resizing, splitting and stitching of a whole slide, and the
//! evaluation downscale.
//!
//! ```text
//! cargo run --release --example tiled_inference
//! ```

use dermaseg::data::Disease;
use dermaseg::nn::Tensor;
use dermaseg::seg::{SegModel, SegModelConfig};
use dermaseg::synth::{generate_slide, GenConfig};
use dermaseg::tiling::{aligned_size, eval_pair, predict_slide, split_tiles, stitch_tiles, TileConfig};

fn main() -> dermaseg::Result<()> {
    let cfg = TileConfig::default();
    for (w, h) in [(1000, 700), (1500, 260), (100, 90)] {
        println!("{w}x{h} -> {:?}", aligned_size(w, h, &cfg));
    }

    // splitting and stitching are exact inverses
    let t = Tensor::from_vec(&[512, 768, 2], (0..512 * 768 * 2).map(|v| v as f32).collect())?;
    let tiles = split_tiles(&t, 256)?;
    let back = stitch_tiles(&tiles, 768, 512, 256)?;
    println!("{} tiles, round trip exact: {}", tiles.len(), back == t);

    // an untrained model still shows the mechanics end to end
    let gen = GenConfig {
        slide_size: (600, 900),
        ..GenConfig::default()
    };
    let (image, gt) = generate_slide(&gen, 0, Disease::Eczema);
    let model = SegModel::build(&SegModelConfig {
        base_width: 4,
        depth_stages: 3,
        ..SegModelConfig::unet_desk()
    })?;
    let pred = predict_slide(&model, &image, &cfg)?;
    println!(
        "slide {}x{}, predicted at {:?}, probabilities {:?}",
        image.width(),
        image.height(),
        pred.aligned,
        pred.probs.shape()
    );
    let full = pred.mask_at(gt.width(), gt.height());
    let (p, g) = eval_pair(&gt, &full, &cfg)?;
    println!("scored at {:?}", g.dims());
    assert_eq!(p.dims(), g.dims());
    Ok(())
}
