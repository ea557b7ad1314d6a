//! Parameter counts of the U-Net and of EU-Nets along the compound-scaling
//! curve.
//!
//! ```text
//! cargo run --release --example compound_scaling
//! ```

use dermaseg::seg::{EfficientEncoderConfig, SegModel, SegModelConfig};

fn main() -> dermaseg::Result<()> {
    let unet = SegModel::build(&SegModelConfig::unet_desk())?;
    println!("U-Net desk: {} parameters", unet.parameter_count());
    let eunet = SegModel::build(&SegModelConfig::eunet_desk())?;
    println!("EU-Net desk: {} parameters", eunet.parameter_count());

    println!("\nphi  width  depth  input  encoder blocks  parameters");
    for phi in 0..=3 {
        let cfg = SegModelConfig::eunet_compound(phi);
        let enc = EfficientEncoderConfig::scaled(cfg.width_mult, cfg.depth_mult);
        let blocks: usize = enc.stages.iter().map(|s| s.repeats).sum();
        let m = SegModel::build(&cfg)?;
        println!(
            "{phi:>3}  {:>5.2}  {:>5.2}  {:>5}  {blocks:>14}  {:>10}",
            cfg.width_mult,
            cfg.depth_mult,
            cfg.input_size,
            m.parameter_count()
        );
    }
    Ok(())
}
